use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{exchange_hash, Backend, GatewayError, LvmOutcome, LvmRequest, LvmResponse};
use crate::error::{Error, Result};
use crate::eval::{match_truth, MatchPolicy};
use crate::model::StudyBundle;
use crate::prompt::PromptBundle;

/// Simulated model behaviour. Draws are keyed by (seed, candidate id) only,
/// so every configuration sees the same uniforms for a given candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockOracleParams {
    /// P(KEEP | true nodule).
    pub keep_rate: f64,
    /// P(DISCARD | false candidate).
    pub discard_rate: f64,
    pub refusal_rate: f64,
    /// Applied to `refusal_rate` when medical intent is not concealed.
    pub conceal_off_refusal_multiplier: f64,
    pub rng_seed: u64,
}

impl Default for MockOracleParams {
    fn default() -> Self {
        MockOracleParams::perfect(0)
    }
}

impl MockOracleParams {
    pub fn perfect(rng_seed: u64) -> Self {
        MockOracleParams {
            keep_rate: 1.0,
            discard_rate: 1.0,
            refusal_rate: 0.0,
            conceal_off_refusal_multiplier: 1.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("keep_rate", self.keep_rate),
            ("discard_rate", self.discard_rate),
            ("refusal_rate", self.refusal_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        let m = self.conceal_off_refusal_multiplier;
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::input(format!("refusal multiplier {m} must be >= 0")));
        }
        Ok(())
    }

    fn refusal_probability(&self, conceal: bool) -> f64 {
        if conceal {
            self.refusal_rate
        } else {
            (self.refusal_rate * self.conceal_off_refusal_multiplier).min(1.0)
        }
    }
}

fn draw_rng(seed: u64, candidate_id: &str) -> ChaCha8Rng {
    let d = Sha256::digest(format!("mock-oracle:{candidate_id}").as_bytes());
    let key = u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"));
    ChaCha8Rng::seed_from_u64(seed ^ key)
}

const LOOK: [&str; 4] = [
    "The outlined area sits inside the highlighted region and is clearly visible on this slice.",
    "The marked area is small and well defined against the surrounding tissue.",
    "I examined the outlined area together with the color reference.",
    "The outline encloses a compact bright spot.",
];
const KEEP_REASON: [&str; 3] = [
    "Its position agrees with the location given in the note, and its round shape fits a true nodule.",
    "The region color matches the described location, so this looks like a true positive.",
    "The shape is round and solid and it lies where the description says it should.",
];
const DISCARD_REASON: [&str; 3] = [
    "Its position does not agree with the described location, so this is likely a false positive.",
    "The spot looks elongated like a vessel rather than a nodule.",
    "It sits along the edge of the region, which suggests an artifact rather than a nodule.",
];
const REFUSALS: [&str; 2] = [
    "I'm sorry, but I can't help with interpreting medical images.",
    "I cannot assist with medical diagnosis. Please consult a qualified professional.",
];

/// Deterministic simulated answer for one candidate.
pub fn mock_outcome(bundle: &PromptBundle, is_true: bool, params: &MockOracleParams) -> LvmOutcome {
    let mut rng = draw_rng(params.rng_seed, &bundle.candidate_id);
    let u_refuse: f64 = rng.random();
    let u_decide: f64 = rng.random();
    if u_refuse < params.refusal_probability(bundle.config.conceal_medical_intent) {
        return LvmOutcome::Refusal(REFUSALS[rng.random_range(0..REFUSALS.len())].to_string());
    }
    let keep = if is_true {
        u_decide < params.keep_rate
    } else {
        u_decide >= params.discard_rate
    };
    let look = LOOK[rng.random_range(0..LOOK.len())];
    let (reason, answer) = if keep {
        (KEEP_REASON[rng.random_range(0..KEEP_REASON.len())], "KEEP")
    } else {
        (DISCARD_REASON[rng.random_range(0..DISCARD_REASON.len())], "DISCARD")
    };
    LvmOutcome::Text(format!("{look} {reason}\n\nFINAL ANSWER: {answer}"))
}

pub fn mock_respond(bundle: &PromptBundle, is_true: bool, params: &MockOracleParams) -> LvmResponse {
    let req = LvmRequest::new(bundle.clone(), "mock");
    LvmResponse {
        outcome: mock_outcome(bundle, is_true, params),
        latency_ms: 0,
        backend_id: "mock".into(),
        exchange_hash: exchange_hash(&req),
    }
}

/// Oracle backend that knows which candidates are true nodules.
#[derive(Clone, Debug)]
pub struct MockBackend {
    params: MockOracleParams,
    truth: HashMap<(String, String), bool>,
}

impl MockBackend {
    pub fn new(params: MockOracleParams) -> Result<Self> {
        params.validate()?;
        Ok(MockBackend {
            params,
            truth: HashMap::new(),
        })
    }

    /// Registers ground-truth flags for every candidate of each study.
    /// Studies without truth count all their candidates as false.
    pub fn from_studies(
        params: MockOracleParams,
        studies: &[StudyBundle],
        policy: &MatchPolicy,
    ) -> Result<Self> {
        let mut m = MockBackend::new(params)?;
        for s in studies {
            m.register_study(s, policy);
        }
        Ok(m)
    }

    pub fn register_study(&mut self, study: &StudyBundle, policy: &MatchPolicy) {
        let truth = study.truth.as_deref().unwrap_or(&[]);
        let matched = match_truth(&study.candidates, truth, study.volume.spacing(), policy);
        for (c, flag) in study.candidates.iter().zip(matched.candidate_is_true) {
            self.insert(&study.study_id, &c.id, flag);
        }
    }

    pub fn insert(&mut self, study_id: &str, candidate_id: &str, is_true: bool) {
        self.truth
            .insert((study_id.to_string(), candidate_id.to_string()), is_true);
    }

    pub fn params(&self) -> &MockOracleParams {
        &self.params
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn call(&self, req: &LvmRequest, _hash: &str) -> std::result::Result<LvmOutcome, GatewayError> {
        let b = &req.bundle;
        let is_true = *self
            .truth
            .get(&(b.study_id.clone(), b.candidate_id.clone()))
            .ok_or_else(|| {
                GatewayError::Config(format!(
                    "mock oracle has no ground truth for {}/{}",
                    b.study_id, b.candidate_id
                ))
            })?;
        Ok(mock_outcome(b, is_true, &self.params))
    }
}
