//! One-to-one candidate/truth matching.
//!
//! Solved as a min-cost assignment: eligible pairs cost their distance (or
//! `1 - IoU`), ineligible and padding pairs cost a penalty larger than any
//! eligible total. The optimum therefore maximises the number of matches
//! first and minimises total cost second. Remaining ties go to the lower
//! candidate id.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroundTruthNodule, NoduleCandidate, Voxel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchPolicy {
    CentroidDistance { max_mm: f64 },
    MaskIou { min_iou: f64 },
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy::CentroidDistance { max_mm: 10.0 }
    }
}

impl MatchPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MatchPolicy::CentroidDistance { max_mm } if !(max_mm.is_finite() && max_mm > 0.0) => {
                Err(Error::input(format!("match distance {max_mm} must be > 0")))
            }
            MatchPolicy::MaskIou { min_iou } if !(min_iou > 0.0 && min_iou <= 1.0) => {
                Err(Error::input(format!("match IoU {min_iou} must lie in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthMatch {
    pub candidate_is_true: Vec<bool>,
    pub truth_detected: Vec<bool>,
    /// (candidate index, truth index), by candidate index.
    pub pairs: Vec<(usize, usize)>,
}

pub fn centroid_distance_mm(a: [f64; 3], b: [f64; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((a[k] - b[k]) * spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Truth voxels: the mask if present, else a sphere of the stated diameter.
pub fn truth_voxels(t: &GroundTruthNodule, spacing: [f64; 3]) -> Vec<Voxel> {
    if let Some(m) = &t.mask {
        return m.clone();
    }
    let r = t.diameter_mm / 2.0;
    let lo = |k: usize| ((t.centroid[k] - r / spacing[k]).floor().max(0.0)) as usize;
    let hi = |k: usize| (t.centroid[k] + r / spacing[k]).ceil().max(0.0) as usize;
    let mut out = Vec::new();
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let p = [x as f64, y as f64, z as f64];
                if centroid_distance_mm(p, t.centroid, spacing) <= r {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

pub fn iou(a: &[Voxel], b: &[Voxel]) -> f64 {
    let sa: HashSet<&Voxel> = a.iter().collect();
    let sb: HashSet<&Voxel> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Cost of pairing, None when the policy forbids it.
pub fn pair_costs(
    candidates: &[NoduleCandidate],
    truth: &[GroundTruthNodule],
    spacing: [f64; 3],
    policy: &MatchPolicy,
) -> Vec<Vec<Option<f64>>> {
    match *policy {
        MatchPolicy::CentroidDistance { max_mm } => candidates
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
            .collect(),
        MatchPolicy::MaskIou { min_iou } => {
            let tvox: Vec<Vec<Voxel>> = truth.iter().map(|t| truth_voxels(t, spacing)).collect();
            candidates
                .iter()
                .map(|c| {
                    let cv = c.voxel_set();
                    tvox.iter()
                        .map(|tv| {
                            let o = iou(&cv, tv);
                            (o >= min_iou).then_some(1.0 - o)
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Square min-cost assignment; returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

pub fn match_truth(
    candidates: &[NoduleCandidate],
    truth: &[GroundTruthNodule],
    spacing: [f64; 3],
    policy: &MatchPolicy,
) -> TruthMatch {
    let (nc, nt) = (candidates.len(), truth.len());
    let mut out = TruthMatch {
        candidate_is_true: vec![false; nc],
        truth_detected: vec![false; nt],
        pairs: Vec::new(),
    };
    if nc == 0 || nt == 0 {
        return out;
    }
    let costs = pair_costs(candidates, truth, spacing, policy);
    let mut order: Vec<usize> = (0..nc).collect();
    order.sort_by(|&a, &b| candidates[a].id.cmp(&candidates[b].id).then(a.cmp(&b)));
    let mut rank = vec![0usize; nc];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    const TIE: f64 = 1e-9;
    let n = nc.max(nt);
    let max_cost = costs
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, &c| m.max(c));
    let big = (n as f64 + 1.0) * (max_cost + 1.0);
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match costs.get(i).and_then(|r| r.get(j)).copied().flatten() {
                    Some(c) => c + rank[i] as f64 * TIE,
                    None => big,
                })
                .collect()
        })
        .collect();
    for (i, j) in hungarian(&matrix).into_iter().enumerate() {
        if i < nc && j < nt && costs[i][j].is_some() {
            out.candidate_is_true[i] = true;
            out.truth_detected[j] = true;
            out.pairs.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundingBox;

    fn cand(id: &str, c: [f64; 3]) -> NoduleCandidate {
        let v = c.map(|x| x.round() as usize);
        NoduleCandidate {
            id: id.into(),
            centroid: c,
            bbox: BoundingBox { min: v, max: v },
            confidence: 1.0,
            mask: None,
        }
    }

    fn truth(c: [f64; 3]) -> GroundTruthNodule {
        GroundTruthNodule {
            id: "t".into(),
            centroid: c,
            diameter_mm: 6.0,
            mask: None,
        }
    }

    #[test]
    fn basic_cases() {
        let p = MatchPolicy::default();
        let m = match_truth(&[cand("a", [5.0, 5.0, 5.0])], &[truth([5.0, 5.0, 5.0])], [1.0; 3], &p);
        assert_eq!(m.candidate_is_true, vec![true]);
        assert_eq!(m.truth_detected, vec![true]);

        let m = match_truth(
            &[cand("a", [8.0, 5.0, 5.0]), cand("b", [6.0, 5.0, 5.0])],
            &[truth([5.0, 5.0, 5.0])],
            [1.0; 3],
            &p,
        );
        assert_eq!(m.candidate_is_true, vec![false, true]);

        let m = match_truth(&[cand("a", [1.0; 3])], &[], [1.0; 3], &p);
        assert_eq!(m.candidate_is_true, vec![false]);
    }

    #[test]
    fn tie_goes_to_lower_id() {
        let p = MatchPolicy::default();
        let m = match_truth(
            &[cand("z", [7.0, 5.0, 5.0]), cand("b", [3.0, 5.0, 5.0])],
            &[truth([5.0, 5.0, 5.0])],
            [1.0; 3],
            &p,
        );
        assert_eq!(m.candidate_is_true, vec![false, true]);
    }

    #[test]
    fn optimal_beats_greedy() {
        // Greedy would pair c0-t0 (1 mm) and leave t1 unmatched.
        let p = MatchPolicy::CentroidDistance { max_mm: 5.0 };
        let cands = [cand("c0", [5.0, 0.0, 0.0]), cand("c1", [1.0, 0.0, 0.0])];
        let tr = [truth([4.0, 0.0, 0.0]), truth([9.0, 0.0, 0.0])];
        let m = match_truth(&cands, &tr, [1.0; 3], &p);
        assert_eq!(m.truth_detected, vec![true, true]);
    }

    #[test]
    fn spacing_is_respected() {
        let p = MatchPolicy::default();
        let m = match_truth(&[cand("a", [5.0, 5.0, 9.0])], &[truth([5.0, 5.0, 5.0])], [1.0, 1.0, 3.0], &p);
        assert_eq!(m.candidate_is_true, vec![false]);
    }

    #[test]
    fn iou_mode() {
        let p = MatchPolicy::MaskIou { min_iou: 0.3 };
        let mut c = cand("a", [5.0, 5.0, 5.0]);
        c.bbox = BoundingBox {
            min: [3, 3, 3],
            max: [7, 7, 7],
        };
        let m = match_truth(&[c], &[truth([5.0, 5.0, 5.0])], [1.0; 3], &p);
        assert!(m.candidate_is_true[0]);
        assert!(MatchPolicy::MaskIou { min_iou: 0.0 }.validate().is_err());
        assert!(MatchPolicy::CentroidDistance { max_mm: -1.0 }.validate().is_err());
    }
}
