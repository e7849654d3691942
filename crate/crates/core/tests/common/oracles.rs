//! Independent reference implementations of detection, matching and lookup.

use std::collections::BTreeMap;

use occ_core::eval::{centroid_distance_mm, match_truth, MatchPolicy};
use occ_core::model::{voxel_count, BoundingBox, Voxel};
use occ_core::synth::{cohort_study, Connectivity};
use occ_core::{
    baseline_detect, locate_candidate, CtVolume, DetectorParams, GroundTruthNodule, LobeMap, Location, LungLobe,
    NoduleCandidate,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Components of in-lung voxels at or above the threshold, volume filtered,
/// each as a sorted voxel list, ordered by size then first voxel.
fn flood_oracle(vol: &CtVolume, lobes: &LobeMap, p: &DetectorParams) -> Vec<Vec<Voxel>> {
    let [nx, ny, nz] = vol.dims();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let fg = |x: usize, y: usize, z: usize| {
        lobes.labels()[idx(x, y, z)] != 0 && vol.voxels()[idx(x, y, z)] >= p.hu_threshold
    };
    let mut uf = UnionFind((0..nx * ny * nz).collect());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !fg(x, y, z) {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let manhattan = dx.abs() + dy.abs() + dz.abs();
                            if manhattan == 0 || (p.connectivity == Connectivity::Six && manhattan > 1) {
                                continue;
                            }
                            let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                                continue;
                            }
                            let (a, b, c) = (a as usize, b as usize, c as usize);
                            if fg(a, b, c) {
                                uf.union(idx(x, y, z), idx(a, b, c));
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Voxel>> = BTreeMap::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if fg(x, y, z) {
                    let r = uf.find(idx(x, y, z));
                    groups.entry(r).or_default().push([x, y, z]);
                }
            }
        }
    }
    let mm3 = vol.voxel_volume_mm3();
    let mut comps: Vec<Vec<Voxel>> = groups
        .into_values()
        .filter(|g| {
            let v = g.len() as f64 * mm3;
            v >= p.min_volume_mm3 && v <= p.max_volume_mm3
        })
        .collect();
    // Scan order already sorts each group; order groups like the detector.
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(idx(a[0][0], a[0][1], a[0][2]).cmp(&idx(b[0][0], b[0][1], b[0][2]))));
    comps
}

fn random_blobs(seed: u64, dims: [usize; 3]) -> (CtVolume, LobeMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = voxel_count(dims);
    let mut hu = vec![-900i16; n];
    let labels: Vec<u8> = (0..n).map(|i| if i % 7 == 0 { 0 } else { 1 + (i % 5) as u8 }).collect();
    for _ in 0..rng.random_range(1..12) {
        let c = [0, 1, 2].map(|a| rng.random_range(0..dims[a]));
        let r = rng.random_range(0..4) as i64;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = [x as i64 - c[0] as i64, y as i64 - c[1] as i64, z as i64 - c[2] as i64];
                    if d.iter().map(|v| v * v).sum::<i64>() <= r * r && rng.random_bool(0.8) {
                        hu[x + dims[0] * (y + dims[1] * z)] = rng.random_range(-350..200);
                    }
                }
            }
        }
    }
    (
        CtVolume::new(dims, [1.0, 1.2, 1.5], hu).unwrap(),
        LobeMap::new(dims, labels).unwrap(),
    )
}

fn assert_detector_matches(vol: &CtVolume, lobes: &LobeMap, p: &DetectorParams) {
    let got = baseline_detect(vol, lobes, p).unwrap();
    let want = flood_oracle(vol, lobes, p);
    assert_eq!(got.len(), want.len());
    for (c, w) in got.iter().zip(&want) {
        assert_eq!(c.mask.as_ref().unwrap(), w);
    }
}

pub fn detector_equals_flood_fill_on_cohort() {
    let p = DetectorParams::default();
    for i in 0..10 {
        let s = cohort_study(i, 11).unwrap();
        assert_detector_matches(&s.volume, &s.lobes, &p);
    }
}

pub fn detector_equals_flood_fill_on_random_volumes() {
    for seed in 0..40u64 {
        let dims = [[16, 16, 16], [20, 9, 13], [64, 64, 64], [5, 31, 7]][seed as usize % 4];
        let (vol, lobes) = random_blobs(seed, dims);
        for connectivity in [Connectivity::Six, Connectivity::TwentySix] {
            for min in [0.5, 8.0] {
                let p = DetectorParams {
                    hu_threshold: -400,
                    min_volume_mm3: min,
                    max_volume_mm3: 400.0,
                    connectivity,
                };
                assert_detector_matches(&vol, &lobes, &p);
            }
        }
    }
}

fn point_candidate(id: String, c: [f64; 3]) -> NoduleCandidate {
    let v = c.map(|x| x.round() as usize);
    NoduleCandidate {
        id,
        centroid: c,
        bbox: BoundingBox { min: v, max: v },
        confidence: 0.5,
        mask: None,
    }
}

/// Best (matches, cost) over all injective partial assignments.
fn brute_force(costs: &[Vec<Option<f64>>], nt: usize) -> (usize, f64) {
    fn go(i: usize, costs: &[Vec<Option<f64>>], used: &mut Vec<bool>, acc: (usize, f64), best: &mut (usize, f64)) {
        if i == costs.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        go(i + 1, costs, used, acc, best);
        for j in 0..used.len() {
            if let (false, Some(c)) = (used[j], costs[i][j]) {
                used[j] = true;
                go(i + 1, costs, used, (acc.0 + 1, acc.1 + c), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, costs, &mut vec![false; nt], (0, 0.0), &mut best);
    best
}

pub fn matching_equals_brute_force_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spacing = [1.0, 1.0, 2.0];
    let policy = MatchPolicy::CentroidDistance { max_mm: 6.0 };
    let max_mm = 6.0;
    for _ in 0..3000 {
        let nc = rng.random_range(0..=5);
        let nt = rng.random_range(0..=5);
        // Points on a coarse grid so ties and contention are common.
        let pt = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.random_range(0..6) as f64 * 2.0);
        let cands: Vec<NoduleCandidate> = (0..nc).map(|k| point_candidate(format!("c{k}"), pt(&mut rng))).collect();
        let truth: Vec<GroundTruthNodule> = (0..nt)
            .map(|k| GroundTruthNodule {
                id: format!("t{k}"),
                centroid: pt(&mut rng),
                diameter_mm: 5.0,
                mask: None,
            })
            .collect();
        let costs: Vec<Vec<Option<f64>>> = cands
            .iter()
            .map(|c| {
                truth
                    .iter()
                    .map(|t| {
                        let d = centroid_distance_mm(c.centroid, t.centroid, spacing);
                        (d <= max_mm).then_some(d)
                    })
                    .collect()
            })
            .collect();
        let (best_n, best_cost) = brute_force(&costs, nt);
        let m = match_truth(&cands, &truth, spacing, &policy);
        let cost: f64 = m.pairs.iter().map(|&(i, j)| costs[i][j].expect("pair is eligible")).sum();
        assert_eq!(m.pairs.len(), best_n);
        assert!((cost - best_cost).abs() < 1e-6, "cost {cost} vs optimum {best_cost}");
        assert_eq!(m.candidate_is_true.iter().filter(|&&f| f).count(), best_n);
        assert_eq!(m.truth_detected.iter().filter(|&&f| f).count(), best_n);
        let mut seen = vec![false; nt];
        for &(_, j) in &m.pairs {
            assert!(!std::mem::replace(&mut seen[j], true));
        }
    }
}

/// Scans every voxel of the volume instead of iterating the bbox.
fn locate_oracle(c: &NoduleCandidate, lobes: &LobeMap) -> Location {
    let [nx, ny, nz] = lobes.dims();
    let cv = c.centroid.map(|v| (v + 0.5).floor() as usize);
    let mut centroid_label = 0;
    let mut counts = [0usize; 6];
    let mut total = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let l = lobes.labels()[x + nx * (y + ny * z)];
                if [x, y, z] == cv {
                    centroid_label = l;
                }
                let inside = (0..3).all(|a| [x, y, z][a] >= c.bbox.min[a] && [x, y, z][a] <= c.bbox.max[a]);
                if inside {
                    counts[l as usize] += 1;
                    total += 1;
                }
            }
        }
    }
    let label = if centroid_label != 0 {
        centroid_label
    } else {
        (1..=5).find(|&l| 2 * counts[l] >= total).unwrap_or(0) as u8
    };
    LungLobe::from_label(label).map_or(Location::Background, Location::Lobe)
}

pub fn locate_equals_voxel_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let dims = [12, 10, 8];
        let n = voxel_count(dims);
        // Blocky label fields with large background areas.
        let block = rng.random_range(2..5);
        let table: Vec<u8> = (0..64).map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(1..=5) }).collect();
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let (x, y, z) = (i % 12, (i / 12) % 10, i / 120);
                table[(x / block + 4 * (y / block) + 16 * (z / block)) % 64]
            })
            .collect();
        let lobes = LobeMap::new(dims, labels).unwrap_or_else(|_| LobeMap::new(dims, vec![1; n]).unwrap());
        for _ in 0..20 {
            let min = [0, 1, 2].map(|a| rng.random_range(0..dims[a]));
            let max = [0, 1, 2].map(|a| rng.random_range(min[a]..dims[a]));
            let centroid = [0, 1, 2].map(|a| rng.random_range(min[a] as f64..=max[a] as f64));
            let c = NoduleCandidate {
                id: "c".into(),
                centroid,
                bbox: BoundingBox { min, max },
                confidence: 1.0,
                mask: None,
            };
            assert_eq!(locate_candidate(&c, &lobes).unwrap(), locate_oracle(&c, &lobes));
        }
    }
}
