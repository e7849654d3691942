//! Synthetic phantom studies, a deterministic threshold detector, and
//! ingestion of externally produced candidate files.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    linear_index, locate_candidate, voxel_count, BoundingBox, CtVolume, Dims, GroundTruthNodule,
    LobeMap, Location, LungLobe, NoduleCandidate, Provenance, StudyBundle, Voxel, HU_MAX, HU_MIN,
};
use crate::store::{sha256_hex, to_json_bytes};

/// Typical lung parenchyma intensity.
pub const PARENCHYMA_HU: i16 = -850;
/// Soft tissue outside the lungs.
pub const EXTERIOR_HU: i16 = 40;

fn default_parenchyma() -> i16 {
    PARENCHYMA_HU
}

fn default_exterior() -> i16 {
    EXTERIOR_HU
}

fn default_study_id() -> String {
    "phantom".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LobeEllipsoid {
    pub label: u8,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl LobeEllipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedNodule {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub hu: i16,
}

/// Structures that look like nodules to a threshold detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distractor {
    /// Cylinder between two points, standing in for a pulmonary vessel.
    Vessel {
        start_mm: [f64; 3],
        end_mm: [f64; 3],
        radius_mm: f64,
        hu: i16,
    },
    /// Axis-aligned box, standing in for border or reconstruction artifacts.
    BorderArtifact {
        center_mm: [f64; 3],
        half_extent_mm: [f64; 3],
        hu: i16,
    },
}

impl Distractor {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Distractor::Vessel {
                start_mm,
                end_mm,
                radius_mm,
                ..
            } => segment_distance(p, *start_mm, *end_mm) <= *radius_mm,
            Distractor::BorderArtifact {
                center_mm,
                half_extent_mm,
                ..
            } => (0..3).all(|a| (p[a] - center_mm[a]).abs() <= half_extent_mm[a]),
        }
    }

    fn hu(&self) -> i16 {
        match self {
            Distractor::Vessel { hu, .. } | Distractor::BorderArtifact { hu, .. } => *hu,
        }
    }
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    (0..3)
        .map(|i| (ap[i] - t * ab[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "default_study_id")]
    pub study_id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub lobes: Vec<LobeEllipsoid>,
    #[serde(default)]
    pub nodules: Vec<PlantedNodule>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_parenchyma")]
    pub parenchyma_hu: i16,
    #[serde(default = "default_exterior")]
    pub exterior_hu: i16,
    /// Clinical text attached to the study. When absent, one is written from
    /// the planted nodules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl PhantomSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::input("phantom dims must be >= 1"));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::input("phantom spacing must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::input("noise sigma must be >= 0"));
        }
        if self.lobes.is_empty() {
            return Err(Error::input("phantom needs at least one lobe ellipsoid"));
        }
        for l in &self.lobes {
            if !(1..=5).contains(&l.label) {
                return Err(Error::input(format!("lobe label {} outside 1..=5", l.label)));
            }
            if l.semi_axes_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::input("lobe semi-axes must be positive"));
            }
        }
        for (i, n) in self.nodules.iter().enumerate() {
            if !(n.diameter_mm.is_finite() && n.diameter_mm > 0.0) {
                return Err(Error::input(format!("nodule {i}: diameter must be > 0")));
            }
            if !self.lobes.iter().any(|l| l.contains(n.center_mm)) {
                return Err(Error::input(format!(
                    "nodule {i} at {:?} mm lies outside every lobe",
                    n.center_mm
                )));
            }
            let inside = (0..3).all(|a| {
                n.center_mm[a] >= 0.0
                    && n.center_mm[a] <= (self.dims[a] - 1) as f64 * self.spacing[a]
            });
            if !inside {
                return Err(Error::input(format!("nodule {i} lies outside the volume")));
            }
        }
        Ok(())
    }

    fn position_mm(&self, v: Voxel) -> [f64; 3] {
        [
            v[0] as f64 * self.spacing[0],
            v[1] as f64 * self.spacing[1],
            v[2] as f64 * self.spacing[2],
        ]
    }
}

fn all_voxels(dims: Dims) -> impl Iterator<Item = Voxel> {
    (0..dims[2]).flat_map(move |z| {
        (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z]))
    })
}

/// Rasterizes a phantom. Fully determined by the `PhantomSpec`, including its seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<StudyBundle> {
    spec.validate()?;
    let dims = spec.dims;
    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut hu = vec![spec.exterior_hu as f64; n];
    for v in all_voxels(dims) {
        let i = linear_index(dims, v);
        let p = spec.position_mm(v);
        if let Some(l) = spec.lobes.iter().find(|l| l.contains(p)) {
            labels[i] = l.label;
            hu[i] = spec.parenchyma_hu as f64;
        }
        for d in &spec.distractors {
            if d.contains(p) {
                hu[i] = d.hu() as f64;
            }
        }
    }

    let mut truth = Vec::with_capacity(spec.nodules.len());
    for (k, nod) in spec.nodules.iter().enumerate() {
        let r = nod.diameter_mm / 2.0;
        let lo: Vec<usize> = (0..3)
            .map(|a| ((nod.center_mm[a] - r) / spec.spacing[a]).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| {
                (((nod.center_mm[a] + r) / spec.spacing[a]).ceil() as usize).min(dims[a] - 1)
            })
            .collect();
        let mut mask = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = spec.position_mm([x, y, z]);
                    let d2: f64 = (0..3).map(|a| (p[a] - nod.center_mm[a]).powi(2)).sum();
                    if d2 <= r * r {
                        hu[linear_index(dims, [x, y, z])] = nod.hu as f64;
                        mask.push([x, y, z]);
                    }
                }
            }
        }
        truth.push(GroundTruthNodule {
            id: format!("t{}", k + 1),
            centroid: [
                nod.center_mm[0] / spec.spacing[0],
                nod.center_mm[1] / spec.spacing[1],
                nod.center_mm[2] / spec.spacing[2],
            ],
            diameter_mm: nod.diameter_mm,
            mask: Some(mask),
        });
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::input(format!("noise: {e}")))?;
        for v in hu.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let voxels: Vec<i16> = hu
        .iter()
        .map(|v| v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16)
        .collect();

    let volume = CtVolume::new(dims, spec.spacing, voxels)?;
    let lobes = LobeMap::new(dims, labels)?;
    let description = match &spec.description {
        Some(d) => d.clone(),
        None => describe_truth(&truth, &lobes),
    };
    let mut bundle = StudyBundle::new(spec.study_id.clone(), volume, lobes);
    bundle.truth = Some(truth);
    bundle.description = Some(description);
    bundle.provenance = Provenance {
        created_unix_s: 0,
        config_hash: sha256_hex(&to_json_bytes(spec)?),
    };
    bundle.validate()?;
    Ok(bundle)
}

fn describe_truth(truth: &[GroundTruthNodule], lobes: &LobeMap) -> String {
    if truth.is_empty() {
        return "No suspicious pulmonary findings.".to_string();
    }
    truth
        .iter()
        .map(|t| {
            let v = [
                t.centroid[0].round() as usize,
                t.centroid[1].round() as usize,
                t.centroid[2].round() as usize,
            ];
            match LungLobe::from_label(lobes.get(v)) {
                Some(l) => format!("A {:.0} mm nodule in the {}.", t.diameter_mm, l.name()),
                None => format!("A {:.0} mm nodule.", t.diameter_mm),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::input(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub hu_threshold: i16,
    pub min_volume_mm3: f64,
    pub max_volume_mm3: f64,
    pub connectivity: Connectivity,
}

impl Default for DetectorParams {
    /// Sensitive settings: anything much denser than aerated lung is reported.
    fn default() -> Self {
        DetectorParams {
            hu_threshold: -400,
            min_volume_mm3: 5.0,
            max_volume_mm3: 40_000.0,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_volume_mm3.is_finite()
            && self.max_volume_mm3.is_finite()
            && self.min_volume_mm3 >= 0.0
            && self.min_volume_mm3 < self.max_volume_mm3)
        {
            return Err(Error::input(format!(
                "detector volume range [{}, {}] is invalid",
                self.min_volume_mm3, self.max_volume_mm3
            )));
        }
        Ok(())
    }
}

/// Content-derived candidate id: stable for a given centroid and box.
pub fn candidate_id(centroid: [f64; 3], bbox: &BoundingBox) -> String {
    let key = format!(
        "{:.4},{:.4},{:.4}|{},{},{}|{},{},{}",
        centroid[0],
        centroid[1],
        centroid[2],
        bbox.min[0],
        bbox.min[1],
        bbox.min[2],
        bbox.max[0],
        bbox.max[1],
        bbox.max[2]
    );
    format!("cand-{}", &sha256_hex(key.as_bytes())[..12])
}

/// Builds a candidate from a component's voxels (in any order).
pub fn candidate_from_component(mut voxels: Vec<Voxel>, dims: Dims, confidence: f64) -> NoduleCandidate {
    voxels.sort_by_key(|v| linear_index(dims, *v));
    let n = voxels.len() as f64;
    let mut sum = [0.0f64; 3];
    let mut min = voxels[0];
    let mut max = voxels[0];
    for v in &voxels {
        for a in 0..3 {
            sum[a] += v[a] as f64;
            min[a] = min[a].min(v[a]);
            max[a] = max[a].max(v[a]);
        }
    }
    let centroid = [sum[0] / n, sum[1] / n, sum[2] / n];
    let bbox = BoundingBox { min, max };
    NoduleCandidate {
        id: candidate_id(centroid, &bbox),
        centroid,
        bbox,
        confidence,
        mask: Some(voxels),
    }
}

/// Threshold + connected components inside the lungs.
///
/// Candidates come out sorted by descending component volume (ties broken by
/// the component's first voxel in scan order) with
/// `confidence = min(1, volume / max_volume)`.
pub fn baseline_detect(
    volume: &CtVolume,
    lobes: &LobeMap,
    params: &DetectorParams,
) -> Result<Vec<NoduleCandidate>> {
    params.validate()?;
    let dims = volume.dims();
    if dims != lobes.dims() {
        return Err(Error::input(format!(
            "volume dims {dims:?} differ from lobe dims {:?}",
            lobes.dims()
        )));
    }
    let n = voxel_count(dims);
    let fg: Vec<bool> = volume
        .voxels()
        .iter()
        .zip(lobes.labels())
        .map(|(&h, &l)| l != 0 && h >= params.hu_threshold)
        .collect();
    let offsets = params.connectivity.offsets();
    let mut visited = vec![false; n];
    let mut components: Vec<(usize, Vec<Voxel>)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !fg[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        let mut comp = Vec::new();
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            comp.push([x, y, z]);
            for o in &offsets {
                let nx = x as isize + o[0];
                let ny = y as isize + o[1];
                let nz = z as isize + o[2];
                if nx < 0
                    || ny < 0
                    || nz < 0
                    || nx >= dims[0] as isize
                    || ny >= dims[1] as isize
                    || nz >= dims[2] as isize
                {
                    continue;
                }
                let j = linear_index(dims, [nx as usize, ny as usize, nz as usize]);
                if fg[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        components.push((start, comp));
    }

    let voxel_mm3 = volume.voxel_volume_mm3();
    let mut kept: Vec<(f64, usize, Vec<Voxel>)> = components
        .into_iter()
        .map(|(first, comp)| (comp.len() as f64 * voxel_mm3, first, comp))
        .filter(|(vol, _, _)| *vol >= params.min_volume_mm3 && *vol <= params.max_volume_mm3)
        .collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(kept
        .into_iter()
        .map(|(vol, _, comp)| {
            candidate_from_component(comp, dims, (vol / params.max_volume_mm3).min(1.0))
        })
        .collect())
}

fn schema_err(index: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        index,
        field: field.into(),
        message: message.into(),
    }
}

/// Parses a candidates.json document (a JSON array of candidates) and checks
/// each entry against the volume dims.
pub fn parse_candidates(bytes: &[u8], dims: Dims) -> Result<Vec<NoduleCandidate>> {
    let doc: serde_json::Value = serde_json::from_slice(bytes)?;
    let entries = doc
        .as_array()
        .ok_or_else(|| Error::input("candidates file must hold a JSON array"))?;
    let mut out = Vec::with_capacity(entries.len());
    let mut ids = std::collections::HashSet::new();
    for (i, entry) in entries.iter().enumerate() {
        let obj = entry
            .as_object()
            .ok_or_else(|| schema_err(i, "<entry>", "must be an object"))?;
        for field in ["id", "centroid", "bbox", "confidence"] {
            if !obj.contains_key(field) {
                return Err(schema_err(i, field, "missing"));
            }
        }
        for field in obj.keys() {
            if !matches!(field.as_str(), "id" | "centroid" | "bbox" | "confidence" | "mask") {
                return Err(schema_err(i, field.as_str(), "unknown field"));
            }
        }
        let c: NoduleCandidate = serde_json::from_value(entry.clone()).map_err(|e| {
            let msg = e.to_string();
            let field = ["id", "centroid", "bbox", "confidence", "mask"]
                .into_iter()
                .find(|f| obj.get(*f).is_some_and(|v| field_fails(f, v)))
                .unwrap_or("<entry>");
            schema_err(i, field, msg)
        })?;
        c.check(dims).map_err(|(field, msg)| schema_err(i, field, msg))?;
        if !ids.insert(c.id.clone()) {
            return Err(schema_err(i, "id", format!("duplicate id `{}`", c.id)));
        }
        out.push(c);
    }
    Ok(out)
}

fn field_fails(field: &str, value: &serde_json::Value) -> bool {
    let v = value.clone();
    match field {
        "id" => serde_json::from_value::<String>(v).is_err(),
        "centroid" => serde_json::from_value::<[f64; 3]>(v).is_err(),
        "bbox" => serde_json::from_value::<BoundingBox>(v).is_err(),
        "confidence" => serde_json::from_value::<f64>(v).is_err(),
        "mask" => serde_json::from_value::<Option<Vec<Voxel>>>(v).is_err(),
        _ => false,
    }
}

pub fn ingest_candidates(path: &Path, dims: Dims) -> Result<Vec<NoduleCandidate>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&bytes, dims)
}

/// Parses a truth.json document (JSON array of ground-truth nodules).
pub fn parse_truth(bytes: &[u8], dims: Dims) -> Result<Vec<GroundTruthNodule>> {
    let truth: Vec<GroundTruthNodule> = serde_json::from_slice(bytes)?;
    for (i, t) in truth.iter().enumerate() {
        t.check(dims).map_err(|(field, msg)| schema_err(i, field, msg))?;
    }
    Ok(truth)
}

/// Geometry of the five-lobe phantom used by [`cohort_spec`].
pub const COHORT_DIMS: Dims = [64, 64, 48];
pub const COHORT_SPACING: [f64; 3] = [2.0, 2.0, 2.5];

pub fn cohort_lobes() -> Vec<LobeEllipsoid> {
    let e = |label, c: [f64; 3], s: [f64; 3]| LobeEllipsoid {
        label,
        center_mm: c,
        semi_axes_mm: s,
    };
    vec![
        e(3, [36.0, 64.0, 90.0], [22.0, 40.0, 20.0]),
        e(4, [36.0, 64.0, 60.0], [22.0, 40.0, 10.0]),
        e(5, [36.0, 64.0, 28.0], [22.0, 40.0, 22.0]),
        e(1, [92.0, 64.0, 82.0], [22.0, 40.0, 28.0]),
        e(2, [92.0, 64.0, 30.0], [22.0, 40.0, 24.0]),
    ]
}

/// One member of a reproducible phantom cohort: 1–3 true nodules plus 4–7
/// vessel/artifact distractors, about eight candidates per scan.
pub fn cohort_spec(index: usize, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let lobes = cohort_lobes();
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();

    let mut place = |rng: &mut ChaCha8Rng, reach: f64, lobe_filter: &dyn Fn(&LobeEllipsoid) -> bool| -> Option<[f64; 3]> {
        let eligible: Vec<&LobeEllipsoid> = lobes.iter().filter(|l| lobe_filter(l)).collect();
        for _ in 0..10_000 {
            let l = eligible[rng.random_range(0..eligible.len())];
            let u: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                continue;
            }
            let p = [
                l.center_mm[0] + 0.6 * u[0] * l.semi_axes_mm[0],
                l.center_mm[1] + 0.6 * u[1] * l.semi_axes_mm[1],
                l.center_mm[2] + 0.6 * u[2] * l.semi_axes_mm[2],
            ];
            let clear = placed.iter().all(|(q, r)| {
                let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
                d >= r + reach + 4.0
            });
            if clear {
                placed.push((p, reach));
                return Some(p);
            }
        }
        None
    };

    let n_nodules = rng.random_range(1..=3usize);
    let mut nodules = Vec::new();
    for _ in 0..n_nodules {
        let diameter_mm = rng.random_range(8.0..16.0f64).round();
        let hu = rng.random_range(-100..=60i16);
        let any = |_: &LobeEllipsoid| true;
        let center_mm = place(&mut rng, diameter_mm / 2.0, &any).expect("nodules are placed first");
        nodules.push(PlantedNodule {
            center_mm,
            diameter_mm,
            hu,
        });
    }
    let n_distractors = rng.random_range(4..=7usize);
    let mut distractors = Vec::new();
    for k in 0..n_distractors {
        if k % 3 == 2 {
            let half = [
                rng.random_range(2.0..4.0),
                rng.random_range(2.0..4.0),
                rng.random_range(2.5..4.0),
            ];
            let reach = half.iter().map(|h| h * h).sum::<f64>().sqrt();
            let any = |_: &LobeEllipsoid| true;
            let Some(center_mm) = place(&mut rng, reach, &any) else {
                continue;
            };
            distractors.push(Distractor::BorderArtifact {
                center_mm,
                half_extent_mm: half,
                hu: rng.random_range(-250..=-120i16),
            });
        } else {
            let length: f64 = rng.random_range(10.0..18.0);
            let radius_mm: f64 = rng.random_range(1.6..2.4);
            let reach = length / 2.0 + radius_mm;
            let not_middle = |l: &LobeEllipsoid| l.label != 4;
            let Some(c) = place(&mut rng, reach, &not_middle) else {
                continue;
            };
            let mut dir: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            dir.iter_mut().for_each(|v| *v /= norm);
            let half = length / 2.0;
            distractors.push(Distractor::Vessel {
                start_mm: [c[0] - dir[0] * half, c[1] - dir[1] * half, c[2] - dir[2] * half],
                end_mm: [c[0] + dir[0] * half, c[1] + dir[1] * half, c[2] + dir[2] * half],
                radius_mm,
                hu: rng.random_range(20..=60i16),
            });
        }
    }
    PhantomSpec {
        study_id: format!("phantom-{index:03}"),
        dims: COHORT_DIMS,
        spacing: COHORT_SPACING,
        lobes,
        nodules,
        distractors,
        noise_sigma: 20.0,
        rng_seed: seed.wrapping_add(index as u64),
        parenchyma_hu: PARENCHYMA_HU,
        exterior_hu: EXTERIOR_HU,
        description: None,
    }
}

/// Generates a cohort phantom and runs the baseline detector on it.
pub fn cohort_study(index: usize, seed: u64) -> Result<StudyBundle> {
    let mut study = generate_phantom(&cohort_spec(index, seed))?;
    let cands = baseline_detect(&study.volume, &study.lobes, &DetectorParams::default())?;
    study.set_candidates(cands);
    Ok(study)
}

/// Lobe the candidate falls in, or `None` for background.
pub fn candidate_lobe(c: &NoduleCandidate, lobes: &LobeMap) -> Option<LungLobe> {
    match locate_candidate(c, lobes) {
        Ok(Location::Lobe(l)) => Some(l),
        _ => None,
    }
}
