//! Oncology contouring copilot: candidate nodule false-positive reduction
//! driven by a language-vision model and a clinician's description.

pub mod error;
pub mod eval;
pub mod gateway;
pub mod loss;
pub mod model;
pub mod prompt;
pub mod render;
pub mod store;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use eval::{
    emit_report, evaluate_study, filter_study, match_truth, metrics, run_ablation, ConfusionCounts,
    FilterOptions, MatchPolicy, MetricsReport,
};
pub use gateway::{
    parse_verdict, Backend, Gateway, GatewayError, LvmOutcome, LvmRequest, LvmResponse, MockBackend,
    MockOracleParams,
};
pub use model::{
    locate_candidate, BoundingBox, CtVolume, Decision, GroundTruthNodule, Laterality, LobeLevel, LobeMap,
    Location, LungLobe, NoduleCandidate, Provenance, StrategyConfig, StudyBundle, Toggle, Verdict,
    VerdictSource,
};
pub use prompt::{ablation_configs, build_prompt, PromptBuilder, PromptBundle};
pub use render::{render_slice, select_slice, RenderSpec, SliceMode};
pub use store::{assemble_study, load_study, save_study, StudyStore};
pub use synth::{baseline_detect, generate_phantom, DetectorParams, PhantomSpec};
pub use text::{descriptor_matches, parse_description, rule_prefilter, LocationDescriptor, ParseReport};
