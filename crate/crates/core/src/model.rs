//! Domain types shared by every stage of the pipeline.
//!
//! Voxel grids use an x-fastest layout: the voxel at `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Candidate and truth coordinates are voxel
//! coordinates; physical quantities (diameters, volumes, distances) are in
//! millimeters derived from the volume spacing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;

/// Lower bound of the 12-bit CT intensity range.
pub const HU_MIN: i16 = -1024;
/// Upper bound of the 12-bit CT intensity range.
pub const HU_MAX: i16 = 3071;

pub type Dims = [usize; 3];
pub type Voxel = [usize; 3];

#[inline]
pub fn linear_index(dims: Dims, v: Voxel) -> usize {
    v[0] + dims[0] * (v[1] + dims[1] * v[2])
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::input(format!("dims must all be >= 1, got {dims:?}")));
    }
    Ok(())
}

/// CT intensities in Hounsfield units with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    dims: Dims,
    spacing: [f64; 3],
    voxels: Vec<i16>,
}

impl CtVolume {
    /// Builds a volume, rejecting any voxel outside `[HU_MIN, HU_MAX]`.
    pub fn new(dims: Dims, spacing: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        let vol = CtVolume {
            dims,
            spacing,
            voxels,
        };
        vol.validate()?;
        Ok(vol)
    }

    /// Ingestion path: clamps intensities into the CT range instead of rejecting them.
    pub fn from_hu_clamped(dims: Dims, spacing: [f64; 3], mut voxels: Vec<i16>) -> Result<Self> {
        for v in voxels.iter_mut() {
            *v = (*v).clamp(HU_MIN, HU_MAX);
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims)?;
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::input(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.voxels.len() != voxel_count(self.dims) {
            return Err(Error::input(format!(
                "voxel count {} does not match dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        if let Some(pos) = self
            .voxels
            .iter()
            .position(|v| !(HU_MIN..=HU_MAX).contains(v))
        {
            return Err(Error::input(format!(
                "voxel {pos} has HU {} outside [{HU_MIN}, {HU_MAX}]",
                self.voxels[pos]
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> i16 {
        self.voxels[linear_index(self.dims, v)]
    }
}

/// Per-voxel lung lobe labels (see [`LungLobe`] for the numbering).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LobeMap {
    dims: Dims,
    labels: Vec<u8>,
}

impl LobeMap {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        let map = LobeMap { dims, labels };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims)?;
        if self.labels.len() != voxel_count(self.dims) {
            return Err(Error::input(format!(
                "label count {} does not match dims {:?}",
                self.labels.len(),
                self.dims
            )));
        }
        if let Some(pos) = self.labels.iter().position(|&l| l > 5) {
            return Err(Error::input(format!(
                "voxel {pos} has lobe label {} outside 0..=5",
                self.labels[pos]
            )));
        }
        if self.labels.iter().all(|&l| l == 0) {
            return Err(Error::input("lobe map has no labeled voxel"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> u8 {
        self.labels[linear_index(self.dims, v)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
    Unspecified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LobeLevel {
    Upper,
    Middle,
    Lower,
    Unspecified,
}

/// The five anatomical lobes, numbered as stored in [`LobeMap`] labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LungLobe {
    LeftUpper = 1,
    LeftLower = 2,
    RightUpper = 3,
    RightMiddle = 4,
    RightLower = 5,
}

impl LungLobe {
    pub const ALL: [LungLobe; 5] = [
        LungLobe::LeftUpper,
        LungLobe::LeftLower,
        LungLobe::RightUpper,
        LungLobe::RightMiddle,
        LungLobe::RightLower,
    ];

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(LungLobe::LeftUpper),
            2 => Some(LungLobe::LeftLower),
            3 => Some(LungLobe::RightUpper),
            4 => Some(LungLobe::RightMiddle),
            5 => Some(LungLobe::RightLower),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn laterality(self) -> Laterality {
        match self {
            LungLobe::LeftUpper | LungLobe::LeftLower => Laterality::Left,
            _ => Laterality::Right,
        }
    }

    pub fn level(self) -> LobeLevel {
        match self {
            LungLobe::LeftUpper | LungLobe::RightUpper => LobeLevel::Upper,
            LungLobe::RightMiddle => LobeLevel::Middle,
            LungLobe::LeftLower | LungLobe::RightLower => LobeLevel::Lower,
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            LungLobe::LeftUpper => "LUL",
            LungLobe::LeftLower => "LLL",
            LungLobe::RightUpper => "RUL",
            LungLobe::RightMiddle => "RML",
            LungLobe::RightLower => "RLL",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LungLobe::LeftUpper => "left upper lobe",
            LungLobe::LeftLower => "left lower lobe",
            LungLobe::RightUpper => "right upper lobe",
            LungLobe::RightMiddle => "right middle lobe",
            LungLobe::RightLower => "right lower lobe",
        }
    }
}

/// Where a candidate sits relative to the lobe map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Lobe(LungLobe),
    Background,
}

/// Inclusive voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Voxel,
    pub max: Voxel,
}

impl BoundingBox {
    pub fn contains_voxel(&self, v: Voxel) -> bool {
        (0..3).all(|a| self.min[a] <= v[a] && v[a] <= self.max[a])
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] as f64 <= p[a] && p[a] <= self.max[a] as f64)
    }

    pub fn fits_in(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.min[a] <= self.max[a] && self.max[a] < dims[a])
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn voxels(&self) -> impl Iterator<Item = Voxel> + '_ {
        (self.min[2]..=self.max[2]).flat_map(move |z| {
            (self.min[1]..=self.max[1])
                .flat_map(move |y| (self.min[0]..=self.max[0]).map(move |x| [x, y, z]))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleCandidate {
    pub id: String,
    pub centroid: [f64; 3],
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Voxel>>,
}

impl NoduleCandidate {
    /// Checks the candidate against the volume it belongs to. The error names
    /// the offending field.
    pub fn check(&self, dims: Dims) -> std::result::Result<(), (&'static str, String)> {
        if self.id.trim().is_empty() {
            return Err(("id", "must be a non-empty string".into()));
        }
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err((
                "confidence",
                format!("{} is outside [0, 1]", self.confidence),
            ));
        }
        if !self.bbox.fits_in(dims) {
            return Err((
                "bbox",
                format!("{:?} does not fit in dims {dims:?}", self.bbox),
            ));
        }
        if !self.centroid.iter().all(|c| c.is_finite()) || !self.bbox.contains_point(self.centroid)
        {
            return Err((
                "centroid",
                format!("{:?} lies outside bbox {:?}", self.centroid, self.bbox),
            ));
        }
        if let Some(mask) = &self.mask {
            if let Some(v) = mask.iter().find(|v| !self.bbox.contains_voxel(**v)) {
                return Err(("mask", format!("voxel {v:?} lies outside bbox")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        self.check(dims).map_err(|(field, msg)| {
            Error::input(format!("candidate `{}`: {field}: {msg}", self.id))
        })
    }

    /// Centroid rounded to the nearest voxel.
    pub fn centroid_voxel(&self) -> Voxel {
        [
            self.centroid[0].round() as usize,
            self.centroid[1].round() as usize,
            self.centroid[2].round() as usize,
        ]
    }

    /// Mask voxels, or every voxel of the bbox when no mask is attached.
    pub fn voxel_set(&self) -> Vec<Voxel> {
        match &self.mask {
            Some(m) => m.clone(),
            None => self.bbox.voxels().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNodule {
    pub id: String,
    pub centroid: [f64; 3],
    pub diameter_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Voxel>>,
}

impl GroundTruthNodule {
    pub fn check(&self, dims: Dims) -> std::result::Result<(), (&'static str, String)> {
        if self.id.trim().is_empty() {
            return Err(("id", "must be a non-empty string".into()));
        }
        if !(self.diameter_mm.is_finite() && self.diameter_mm > 0.0) {
            return Err(("diameter_mm", format!("{} must be > 0", self.diameter_mm)));
        }
        let inside = (0..3).all(|a| {
            self.centroid[a].is_finite()
                && self.centroid[a] >= 0.0
                && self.centroid[a] <= (dims[a] - 1) as f64
        });
        if !inside {
            return Err((
                "centroid",
                format!("{:?} lies outside dims {dims:?}", self.centroid),
            ));
        }
        if let Some(mask) = &self.mask {
            if let Some(v) = mask.iter().find(|v| (0..3).any(|a| v[a] >= dims[a])) {
                return Err(("mask", format!("voxel {v:?} lies outside the volume")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    Discard,
    Reject,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Keep => "Keep",
            Decision::Discard => "Discard",
            Decision::Reject => "Reject",
        })
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "keep" => Ok(Decision::Keep),
            "discard" => Ok(Decision::Discard),
            "reject" => Ok(Decision::Reject),
            other => Err(Error::input(format!("unknown decision `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictSource {
    Lvm,
    Rule,
    HumanOverride,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub candidate_id: String,
    pub decision: Decision,
    pub rationale: String,
    pub source: VerdictSource,
}

impl Verdict {
    pub fn validate(&self) -> Result<()> {
        if self.decision == Decision::Reject && self.source != VerdictSource::Lvm {
            return Err(Error::input(format!(
                "verdict for `{}`: Reject is only produced by the model",
                self.candidate_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Seconds since the Unix epoch.
    pub created_unix_s: u64,
    /// Hex SHA-256 of whatever configuration produced the study.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyBundle {
    pub study_id: String,
    pub volume: CtVolume,
    pub lobes: LobeMap,
    pub candidates: Vec<NoduleCandidate>,
    pub truth: Option<Vec<GroundTruthNodule>>,
    pub description: Option<String>,
    /// Effective verdict per candidate (latest entry wins).
    pub verdicts: Vec<Verdict>,
    /// Every verdict ever recorded, model and human, in arrival order.
    pub verdict_history: Vec<Verdict>,
    pub metrics: Option<MetricsReport>,
    pub provenance: Provenance,
}

/// Study ids double as directory names.
pub fn validate_study_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::input(format!("invalid study id `{id}`")))
    }
}

impl StudyBundle {
    pub fn new(study_id: impl Into<String>, volume: CtVolume, lobes: LobeMap) -> Self {
        StudyBundle {
            study_id: study_id.into(),
            volume,
            lobes,
            candidates: Vec::new(),
            truth: None,
            description: None,
            verdicts: Vec::new(),
            verdict_history: Vec::new(),
            metrics: None,
            provenance: Provenance::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_study_id(&self.study_id)?;
        self.volume.validate()?;
        self.lobes.validate()?;
        if self.volume.dims() != self.lobes.dims() {
            return Err(Error::input(format!(
                "lobe map dims {:?} differ from volume dims {:?}",
                self.lobes.dims(),
                self.volume.dims()
            )));
        }
        let dims = self.volume.dims();
        let mut ids = HashSet::new();
        for c in &self.candidates {
            c.validate(dims)?;
            if !ids.insert(c.id.as_str()) {
                return Err(Error::input(format!("duplicate candidate id `{}`", c.id)));
            }
        }
        if let Some(truth) = &self.truth {
            let mut truth_ids = HashSet::new();
            for t in truth {
                t.check(dims).map_err(|(field, msg)| {
                    Error::input(format!("truth `{}`: {field}: {msg}", t.id))
                })?;
                if !truth_ids.insert(t.id.as_str()) {
                    return Err(Error::input(format!("duplicate truth id `{}`", t.id)));
                }
            }
        }
        let mut seen = HashSet::new();
        for v in &self.verdicts {
            v.validate()?;
            if !ids.contains(v.candidate_id.as_str()) {
                return Err(Error::input(format!(
                    "verdict references unknown candidate `{}`",
                    v.candidate_id
                )));
            }
            if !seen.insert(v.candidate_id.as_str()) {
                return Err(Error::input(format!(
                    "more than one verdict for candidate `{}`",
                    v.candidate_id
                )));
            }
        }
        for v in &self.verdict_history {
            v.validate()?;
        }
        Ok(())
    }

    pub fn candidate(&self, id: &str) -> Option<&NoduleCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn verdict_for(&self, candidate_id: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.candidate_id == candidate_id)
    }

    /// Makes `verdicts` the effective decisions and appends them to the history.
    pub fn record_verdicts(&mut self, verdicts: impl IntoIterator<Item = Verdict>) {
        for v in verdicts {
            self.verdict_history.push(v.clone());
            match self
                .verdicts
                .iter_mut()
                .find(|e| e.candidate_id == v.candidate_id)
            {
                Some(e) => *e = v,
                None => self.verdicts.push(v),
            }
        }
        let order: BTreeMap<&str, usize> = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        self.verdicts
            .sort_by_key(|v| order.get(v.candidate_id.as_str()).copied().unwrap_or(usize::MAX));
    }

    /// Clinician override. The model's earlier verdict stays in the history.
    pub fn override_verdict(
        &mut self,
        candidate_id: &str,
        decision: Decision,
        rationale: impl Into<String>,
    ) -> Result<()> {
        if self.candidate(candidate_id).is_none() {
            return Err(Error::NotFound(format!(
                "{}/candidates/{candidate_id}",
                self.study_id
            )));
        }
        let v = Verdict {
            candidate_id: candidate_id.to_string(),
            decision,
            rationale: rationale.into(),
            source: VerdictSource::HumanOverride,
        };
        v.validate()?;
        self.record_verdicts([v]);
        Ok(())
    }

    /// Replaces the candidate list. Verdicts for the previous candidates are dropped
    /// from the effective set; the history keeps them.
    pub fn set_candidates(&mut self, candidates: Vec<NoduleCandidate>) {
        self.candidates = candidates;
        self.verdicts.clear();
        self.metrics = None;
    }
}

/// Maps a candidate to a lobe from the label at its centroid voxel.
///
/// When the centroid voxel is background but at least half of the bbox voxels
/// carry one nonzero label, that label is returned instead.
pub fn locate_candidate(candidate: &NoduleCandidate, lobes: &LobeMap) -> Result<Location> {
    let dims = lobes.dims();
    if !candidate.bbox.fits_in(dims) || !candidate.bbox.contains_point(candidate.centroid) {
        return Err(Error::input(format!(
            "candidate `{}` does not fit lobe map dims {dims:?}",
            candidate.id
        )));
    }
    let label = lobes.get(candidate.centroid_voxel());
    if let Some(lobe) = LungLobe::from_label(label) {
        return Ok(Location::Lobe(lobe));
    }
    let mut counts = [0usize; 6];
    let mut total = 0usize;
    for v in candidate.bbox.voxels() {
        counts[lobes.get(v) as usize] += 1;
        total += 1;
    }
    let rescued = (1..=5u8).find(|&l| 2 * counts[l as usize] >= total);
    Ok(rescued
        .and_then(LungLobe::from_label)
        .map_or(Location::Background, Location::Lobe))
}

/// The six prompt-engineering transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Toggle {
    SingleVisionInput,
    LeaveTimeToThink,
    ConcealMedicalIntent,
    GuidingQuestions,
    VisionInstructions,
    HighlightRoi,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [
        Toggle::SingleVisionInput,
        Toggle::LeaveTimeToThink,
        Toggle::ConcealMedicalIntent,
        Toggle::GuidingQuestions,
        Toggle::VisionInstructions,
        Toggle::HighlightRoi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::SingleVisionInput => "single_vision_input",
            Toggle::LeaveTimeToThink => "leave_time_to_think",
            Toggle::ConcealMedicalIntent => "conceal_medical_intent",
            Toggle::GuidingQuestions => "guiding_questions",
            Toggle::VisionInstructions => "vision_instructions",
            Toggle::HighlightRoi => "highlight_roi",
        }
    }

    pub fn from_name(name: &str) -> Option<Toggle> {
        Toggle::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub single_vision_input: bool,
    pub leave_time_to_think: bool,
    pub conceal_medical_intent: bool,
    pub guiding_questions: bool,
    pub vision_instructions: bool,
    pub highlight_roi: bool,
    pub rng_seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::all_on(0)
    }
}

impl StrategyConfig {
    pub fn all_on(rng_seed: u64) -> Self {
        StrategyConfig {
            single_vision_input: true,
            leave_time_to_think: true,
            conceal_medical_intent: true,
            guiding_questions: true,
            vision_instructions: true,
            highlight_roi: true,
            rng_seed,
        }
    }

    pub fn is_enabled(&self, t: Toggle) -> bool {
        match t {
            Toggle::SingleVisionInput => self.single_vision_input,
            Toggle::LeaveTimeToThink => self.leave_time_to_think,
            Toggle::ConcealMedicalIntent => self.conceal_medical_intent,
            Toggle::GuidingQuestions => self.guiding_questions,
            Toggle::VisionInstructions => self.vision_instructions,
            Toggle::HighlightRoi => self.highlight_roi,
        }
    }

    pub fn set(&mut self, t: Toggle, on: bool) {
        let slot = match t {
            Toggle::SingleVisionInput => &mut self.single_vision_input,
            Toggle::LeaveTimeToThink => &mut self.leave_time_to_think,
            Toggle::ConcealMedicalIntent => &mut self.conceal_medical_intent,
            Toggle::GuidingQuestions => &mut self.guiding_questions,
            Toggle::VisionInstructions => &mut self.vision_instructions,
            Toggle::HighlightRoi => &mut self.highlight_roi,
        };
        *slot = on;
    }

    pub fn without(mut self, t: Toggle) -> Self {
        self.set(t, false);
        self
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn disabled(&self) -> Vec<Toggle> {
        Toggle::ALL
            .into_iter()
            .filter(|t| !self.is_enabled(*t))
            .collect()
    }

    /// Zero-based ablation column this configuration corresponds to, if any.
    /// Columns 0..=5 each drop one toggle (highlight first, single vision last);
    /// column 6 enables all six.
    pub fn table_column(&self) -> Option<usize> {
        match self.disabled().as_slice() {
            [] => Some(6),
            [t] => Some(match t {
                Toggle::HighlightRoi => 0,
                Toggle::VisionInstructions => 1,
                Toggle::GuidingQuestions => 2,
                Toggle::ConcealMedicalIntent => 3,
                Toggle::LeaveTimeToThink => 4,
                Toggle::SingleVisionInput => 5,
            }),
            _ => None,
        }
    }

    /// `all`, or `no-<toggle>` for the leave-one-out columns; other
    /// combinations render as a six-character bit string.
    pub fn label(&self) -> String {
        match self.disabled().as_slice() {
            [] => "all".to_string(),
            [t] => format!("no-{}", t.name()),
            _ => self.bits(),
        }
    }

    pub fn bits(&self) -> String {
        Toggle::ALL
            .iter()
            .map(|t| if self.is_enabled(*t) { '1' } else { '0' })
            .collect()
    }

    /// Parses `all`, `no-<toggle>`, or a six-character bit string in
    /// [`Toggle::ALL`] order. The seed is left at 0.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(StrategyConfig::all_on(0));
        }
        if let Some(name) = s.strip_prefix("no-") {
            return Toggle::from_name(name)
                .map(|t| StrategyConfig::all_on(0).without(t))
                .ok_or_else(|| Error::input(format!("unknown strategy toggle `{name}`")));
        }
        if s.len() == 6 && s.chars().all(|c| c == '0' || c == '1') {
            let mut cfg = StrategyConfig::all_on(0);
            for (t, c) in Toggle::ALL.iter().zip(s.chars()) {
                cfg.set(*t, c == '1');
            }
            return Ok(cfg);
        }
        Err(Error::input(format!("unrecognized strategy config `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lobes_filled(dims: Dims, label: u8) -> LobeMap {
        LobeMap::new(dims, vec![label; voxel_count(dims)]).unwrap()
    }

    fn cand(centroid: [f64; 3], min: Voxel, max: Voxel) -> NoduleCandidate {
        NoduleCandidate {
            id: "c".into(),
            centroid,
            bbox: BoundingBox { min, max },
            confidence: 0.5,
            mask: None,
        }
    }

    #[test]
    fn locate_direct_lookup() {
        let dims = [8, 8, 8];
        let c = cand([4.0, 4.0, 4.0], [3, 3, 3], [5, 5, 5]);
        assert_eq!(
            locate_candidate(&c, &lobes_filled(dims, 1)).unwrap(),
            Location::Lobe(LungLobe::LeftUpper)
        );
        assert_eq!(
            locate_candidate(&c, &lobes_filled(dims, 5)).unwrap(),
            Location::Lobe(LungLobe::RightLower)
        );
    }

    #[test]
    fn locate_rescue_rule_uses_bbox_majority() {
        // bbox 5x5x1 = 25 voxels in z=0; 20 labelled 3 (80%), centroid voxel background.
        let dims = [5, 5, 2];
        let mut labels = vec![0u8; voxel_count(dims)];
        let mut n = 0;
        for y in 0..5 {
            for x in 0..5 {
                if (x, y) != (2, 2) && n < 20 {
                    labels[linear_index(dims, [x, y, 0])] = 3;
                    n += 1;
                }
            }
        }
        let lobes = LobeMap::new(dims, labels).unwrap();
        let c = cand([2.0, 2.0, 0.0], [0, 0, 0], [4, 4, 0]);
        assert_eq!(
            locate_candidate(&c, &lobes).unwrap(),
            Location::Lobe(LungLobe::RightUpper)
        );
    }

    #[test]
    fn locate_background_without_majority() {
        let dims = [4, 4, 1];
        let mut labels = vec![0u8; 16];
        labels[0] = 2;
        let lobes = LobeMap::new(dims, labels).unwrap();
        let c = cand([2.0, 2.0, 0.0], [1, 1, 0], [3, 3, 0]);
        assert_eq!(locate_candidate(&c, &lobes).unwrap(), Location::Background);
    }

    #[test]
    fn locate_rejects_out_of_range_candidate() {
        let c = cand([9.0, 1.0, 1.0], [8, 0, 0], [10, 2, 2]);
        assert!(matches!(
            locate_candidate(&c, &lobes_filled([8, 8, 8], 1)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn volume_invariants() {
        assert!(CtVolume::new([2, 2, 1], [1.0; 3], vec![0; 4]).is_ok());
        assert!(CtVolume::new([0, 2, 1], [1.0; 3], vec![]).is_err());
        assert!(CtVolume::new([2, 2, 1], [1.0, 0.0, 1.0], vec![0; 4]).is_err());
        assert!(CtVolume::new([2, 2, 1], [1.0; 3], vec![0; 3]).is_err());
        assert!(CtVolume::new([2, 2, 1], [1.0; 3], vec![0, 0, 0, 4000]).is_err());
        let v = CtVolume::from_hu_clamped([2, 1, 1], [1.0; 3], vec![-3000, 4000]).unwrap();
        assert_eq!(v.voxels(), &[HU_MIN, HU_MAX]);
    }

    #[test]
    fn lobe_map_invariants() {
        assert!(LobeMap::new([2, 1, 1], vec![0, 6]).is_err());
        assert!(LobeMap::new([2, 1, 1], vec![0, 0]).is_err());
        assert!(LobeMap::new([2, 1, 1], vec![0, 4]).is_ok());
    }

    #[test]
    fn reject_requires_model_source() {
        let v = Verdict {
            candidate_id: "a".into(),
            decision: Decision::Reject,
            rationale: String::new(),
            source: VerdictSource::HumanOverride,
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn strategy_labels_round_trip() {
        for t in Toggle::ALL {
            let cfg = StrategyConfig::all_on(0).without(t);
            assert_eq!(StrategyConfig::parse(&cfg.label()).unwrap(), cfg);
            assert_eq!(StrategyConfig::parse(&cfg.bits()).unwrap(), cfg);
        }
        assert_eq!(StrategyConfig::parse("all").unwrap().table_column(), Some(6));
        assert!(StrategyConfig::parse("no-bogus").is_err());
        let two_off = StrategyConfig::parse("001111").unwrap();
        assert_eq!(two_off.table_column(), None);
    }

    #[test]
    fn override_keeps_history() {
        let vol = CtVolume::new([4, 4, 4], [1.0; 3], vec![-850; 64]).unwrap();
        let lobes = lobes_filled([4, 4, 4], 1);
        let mut b = StudyBundle::new("s1", vol, lobes);
        b.candidates.push(cand([1.0, 1.0, 1.0], [0, 0, 0], [2, 2, 2]));
        b.record_verdicts([Verdict {
            candidate_id: "c".into(),
            decision: Decision::Keep,
            rationale: "model".into(),
            source: VerdictSource::Lvm,
        }]);
        b.override_verdict("c", Decision::Discard, "clinician").unwrap();
        assert_eq!(b.verdicts.len(), 1);
        assert_eq!(b.verdicts[0].decision, Decision::Discard);
        assert_eq!(b.verdict_history.len(), 2);
        assert_eq!(b.verdict_history[0].source, VerdictSource::Lvm);
        assert!(b.validate().is_ok());
        assert!(b.override_verdict("c", Decision::Reject, "x").is_err());
        assert!(b.override_verdict("missing", Decision::Keep, "x").is_err());
    }
}
