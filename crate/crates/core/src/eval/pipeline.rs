//! The false-positive reduction loop over a study, and the ablation sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matching::{match_truth, MatchPolicy};
use super::metrics::{confusion, metrics, ConfusionCounts, MetricsReport};
use super::report::ReportRow;
use crate::error::{Error, Result};
use crate::gateway::{parse_verdict, Gateway, GatewayError, LvmOutcome, LvmRequest};
use crate::model::{Decision, StrategyConfig, StudyBundle, Verdict, VerdictSource};
use crate::prompt::{ablation_configs, PromptBuilder};
use crate::text::{parse_description, rule_prefilter, MatchResult};

/// What to do when the gateway fails outright (auth, config, replay miss).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnBackendError {
    /// Stop and return the error.
    #[default]
    Abort,
    /// Record a Reject for the candidate and carry on.
    Reject,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOptions {
    pub config: StrategyConfig,
    pub builder: PromptBuilder,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub on_error: OnBackendError,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            config: StrategyConfig::default(),
            builder: PromptBuilder::default(),
            temperature: 0.0,
            max_retries: 3,
            timeout_s: 120,
            on_error: OnBackendError::Abort,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub verdicts: Vec<Verdict>,
    /// Text cross-check per candidate id; annotation only.
    pub prefilter: BTreeMap<String, MatchResult>,
    pub n_refusal: u64,
    pub n_transport_error: u64,
}

fn reject(candidate_id: &str, rationale: String) -> Verdict {
    Verdict {
        candidate_id: candidate_id.to_string(),
        decision: Decision::Reject,
        rationale,
        source: VerdictSource::Lvm,
    }
}

/// Builds a prompt per candidate, queries the gateway and parses verdicts,
/// in candidate order. The study itself is not modified.
pub fn filter_study(study: &StudyBundle, gateway: &Gateway, opts: &FilterOptions) -> Result<FilterOutcome> {
    let description = study
        .description
        .as_deref()
        .filter(|d| !d.trim().is_empty())
        .ok_or(Error::MissingField("description"))?;
    let prefilter = rule_prefilter(&study.candidates, &study.lobes, &parse_description(description))?;
    let mut out = FilterOutcome {
        verdicts: Vec::with_capacity(study.candidates.len()),
        prefilter,
        n_refusal: 0,
        n_transport_error: 0,
    };
    for c in &study.candidates {
        let bundle = match opts.builder.build(study, c, &opts.config) {
            Ok(b) => b,
            Err(e) if opts.on_error == OnBackendError::Reject => {
                out.verdicts.push(reject(&c.id, format!("prompt failed: {e}")));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut req = LvmRequest::new(bundle, gateway.backend_id());
        req.temperature = opts.temperature;
        req.max_retries = opts.max_retries;
        req.timeout_s = opts.timeout_s;
        match gateway.send(&req) {
            Ok(resp) => {
                match resp.outcome {
                    LvmOutcome::Refusal(_) => out.n_refusal += 1,
                    LvmOutcome::TransportError(_) => out.n_transport_error += 1,
                    LvmOutcome::Text(_) => {}
                }
                out.verdicts.push(parse_verdict(&resp, &c.id));
            }
            Err(e) if opts.on_error == OnBackendError::Reject => {
                out.verdicts.push(reject(&c.id, format!("backend error: {e}")));
            }
            Err(e) => return Err(Error::Gateway(e)),
        }
    }
    Ok(out)
}

/// Confusion counts for one study's fresh verdicts against its truth.
pub fn study_counts(study: &StudyBundle, verdicts: &[Verdict], policy: &MatchPolicy) -> Result<ConfusionCounts> {
    let truth = study.truth.as_deref().ok_or(Error::MissingField("truth"))?;
    let m = match_truth(&study.candidates, truth, study.volume.spacing(), policy);
    confusion(&study.candidates, &m.candidate_is_true, verdicts, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: StrategyConfig,
    pub report: MetricsReport,
}

impl From<&AblationRow> for ReportRow {
    fn from(r: &AblationRow) -> Self {
        ReportRow {
            label: r.config.label(),
            metrics: r.report.clone(),
        }
    }
}

/// Runs every ablation column over all studies and aggregates per column.
/// Backend failures become Rejects. Studies run on scoped threads; results
/// are reduced in study order, so output does not depend on scheduling.
pub fn run_ablation(
    studies: &[StudyBundle],
    gateway: &Gateway,
    seed: u64,
    policy: &MatchPolicy,
    builder: &PromptBuilder,
) -> Result<Vec<AblationRow>> {
    if studies.is_empty() {
        return Err(Error::input("ablation needs at least one study"));
    }
    policy.validate()?;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(studies.len());
    let mut rows = Vec::new();
    for config in ablation_configs() {
        let opts = FilterOptions {
            config: config.with_seed(seed),
            builder: builder.clone(),
            on_error: OnBackendError::Reject,
            ..FilterOptions::default()
        };
        let mut per_study: Vec<Option<Result<ConfusionCounts>>> = (0..studies.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunk = studies.len().div_ceil(workers);
            for (slots, batch) in per_study.chunks_mut(chunk).zip(studies.chunks(chunk)) {
                let opts = &opts;
                s.spawn(move || {
                    for (slot, study) in slots.iter_mut().zip(batch) {
                        *slot = Some(
                            filter_study(study, gateway, opts)
                                .and_then(|o| study_counts(study, &o.verdicts, policy)),
                        );
                    }
                });
            }
        });
        let counts = per_study
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<ConfusionCounts>();
        rows.push(AblationRow {
            config: opts.config,
            report: metrics(counts)?,
        });
    }
    Ok(rows)
}

/// True when the error came from the model backend rather than the input.
pub fn is_backend_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Gateway(
            GatewayError::Transport(_)
                | GatewayError::Auth(_)
                | GatewayError::Config(_)
                | GatewayError::ReplayMiss { .. }
                | GatewayError::Cassette(_)
        )
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockOracleParams};
    use crate::synth::cohort_study;
    use std::sync::Arc;

    fn cohort(n: usize) -> Vec<StudyBundle> {
        (0..n).map(|i| cohort_study(i, 11).unwrap()).collect()
    }

    fn mock(params: MockOracleParams, studies: &[StudyBundle]) -> Gateway {
        Gateway::new(Arc::new(
            MockBackend::from_studies(params, studies, &MatchPolicy::default()).unwrap(),
        ))
    }

    #[test]
    fn perfect_oracle_filter() {
        let studies = cohort(2);
        let g = mock(MockOracleParams::perfect(3), &studies);
        for s in &studies {
            let out = filter_study(s, &g, &FilterOptions::default()).unwrap();
            assert_eq!(out.verdicts.len(), s.candidates.len());
            let c = study_counts(s, &out.verdicts, &MatchPolicy::default()).unwrap();
            assert_eq!((c.fp, c.fn_, c.n_reject), (0, 0, 0));
            assert!(c.tp >= 1);
        }
    }

    #[test]
    fn missing_description_is_named() {
        let mut s = cohort(1).remove(0);
        s.description = None;
        let g = mock(MockOracleParams::perfect(0), std::slice::from_ref(&s));
        let err = filter_study(&s, &g, &FilterOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingField("description")));
    }

    #[test]
    fn backend_errors_become_rejects_in_sweep() {
        let studies = cohort(1);
        // No truth registered: every call is a configuration error.
        let g = Gateway::new(Arc::new(MockBackend::new(MockOracleParams::perfect(0)).unwrap()));
        let rows = run_ablation(&studies, &g, 0, &MatchPolicy::default(), &PromptBuilder::default()).unwrap();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert_eq!(r.report.counts.n_reject, r.report.counts.n_sample);
        }
        let err = filter_study(&studies[0], &g, &FilterOptions::default()).unwrap_err();
        assert!(is_backend_error(&err));
    }
}
