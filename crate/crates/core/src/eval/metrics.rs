use std::collections::{HashMap, HashSet};
use std::ops::Add;

use serde::{Deserialize, Serialize};

use super::matching::{match_truth, truth_voxels, MatchPolicy};
use crate::error::{Error, Result};
use crate::model::{Decision, NoduleCandidate, StudyBundle, Verdict, Voxel};

/// Rejected candidates sit outside the four cells, so
/// `tp + fp + fn + tn + n_reject == n_sample`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub n_scans: u64,
    pub n_sample: u64,
    pub n_reject: u64,
}

impl ConfusionCounts {
    /// Counts with no rejects.
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64, n_scans: u64) -> Self {
        ConfusionCounts {
            tp,
            fp,
            fn_,
            tn,
            n_scans,
            n_sample: tp + fp + fn_ + tn,
            n_reject: 0,
        }
    }

    pub fn with_rejects(mut self, n_reject: u64) -> Self {
        self.n_sample += n_reject;
        self.n_reject = n_reject;
        self
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            n_scans: self.n_scans + o.n_scans,
            n_sample: self.n_sample + o.n_sample,
            n_reject: self.n_reject + o.n_reject,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// Tallies one verdict per candidate into the confusion cells.
pub fn confusion(
    candidates: &[NoduleCandidate],
    is_true: &[bool],
    verdicts: &[Verdict],
    n_scans: u64,
) -> Result<ConfusionCounts> {
    if is_true.len() != candidates.len() {
        return Err(Error::input(format!(
            "{} truth flags for {} candidates",
            is_true.len(),
            candidates.len()
        )));
    }
    let mut by_id: HashMap<&str, Decision> = HashMap::new();
    for v in verdicts {
        if by_id.insert(v.candidate_id.as_str(), v.decision).is_some() {
            return Err(Error::input(format!("duplicate verdict for {}", v.candidate_id)));
        }
    }
    let ids: HashSet<&str> = candidates.iter().map(|c| c.id.as_str()).collect();
    if let Some(v) = verdicts.iter().find(|v| !ids.contains(v.candidate_id.as_str())) {
        return Err(Error::input(format!("verdict for unknown candidate {}", v.candidate_id)));
    }
    let mut c = ConfusionCounts {
        n_scans,
        n_sample: candidates.len() as u64,
        ..Default::default()
    };
    for (cand, &t) in candidates.iter().zip(is_true) {
        let d = by_id
            .get(cand.id.as_str())
            .ok_or_else(|| Error::input(format!("no verdict for candidate {}", cand.id)))?;
        match (d, t) {
            (Decision::Reject, _) => c.n_reject += 1,
            (Decision::Keep, true) => c.tp += 1,
            (Decision::Discard, true) => c.fn_ += 1,
            (Decision::Keep, false) => c.fp += 1,
            (Decision::Discard, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fdr: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub fp_per_scan: f64,
    pub reject_rate: f64,
    #[serde(default)]
    pub dice3d_mean: Option<f64>,
    pub counts: ConfusionCounts,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default)]
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.n_scans == 0 {
        return Err(Error::input("n_scans must be positive"));
    }
    if counts.n_reject > counts.n_sample {
        return Err(Error::input("n_reject exceeds n_sample"));
    }
    let ConfusionCounts {
        tp,
        fp,
        fn_,
        tn,
        n_scans,
        n_sample,
        n_reject,
    } = counts;
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let fdr = ratio("fdr", fp, tp + fp);
    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let f1 = ratio("f1", 2 * tp, 2 * tp + fp + fn_);
    let reject_rate = ratio("reject_rate", n_reject, n_sample);
    Ok(MetricsReport {
        fdr,
        sensitivity,
        specificity,
        f1,
        fp_per_scan: fp as f64 / n_scans as f64,
        reject_rate,
        dice3d_mean: None,
        counts,
        degenerate,
    })
}

pub fn dice3d(a: &[Voxel], b: &[Voxel]) -> f64 {
    let sa: HashSet<&Voxel> = a.iter().collect();
    let sb: HashSet<&Voxel> = b.iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Metrics of the study's effective verdicts against its ground truth.
/// Dice is averaged over kept candidates matched to a truth nodule.
pub fn evaluate_study(study: &StudyBundle, policy: &MatchPolicy) -> Result<MetricsReport> {
    policy.validate()?;
    let truth = study.truth.as_deref().ok_or(Error::MissingField("truth"))?;
    let spacing = study.volume.spacing();
    let m = match_truth(&study.candidates, truth, spacing, policy);
    let counts = confusion(&study.candidates, &m.candidate_is_true, &study.verdicts, 1)?;
    let mut report = metrics(counts)?;
    let dice: Vec<f64> = m
        .pairs
        .iter()
        .filter(|(ci, _)| {
            study
                .verdict_for(&study.candidates[*ci].id)
                .is_some_and(|v| v.decision == Decision::Keep)
        })
        .map(|&(ci, ti)| dice3d(&study.candidates[ci].voxel_set(), &truth_voxels(&truth[ti], spacing)))
        .collect();
    report.dice3d_mean = (!dice.is_empty()).then(|| dice.iter().sum::<f64>() / dice.len() as f64);
    Ok(report)
}
