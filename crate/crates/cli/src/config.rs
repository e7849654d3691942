//! `occ.toml` plus environment overrides.
//!
//! ```toml
//! store_root = "studies"
//! bind = "127.0.0.1"
//! port = 8080              # 0 picks a free port
//!
//! [backend]
//! kind = "mock"              # mock | replay | http
//! cassette = "run.cassette"  # read by replay
//! record = "run.cassette"    # optional: record every exchange here
//! temperature = 0.0
//! max_retries = 3
//! timeout_s = 120
//! max_in_flight = 4
//! backoff_ms = [1000, 2000, 4000]
//!
//! [backend.mock]
//! keep_rate = 1.0
//! discard_rate = 1.0
//! refusal_rate = 0.0
//! conceal_off_refusal_multiplier = 1.0
//!
//! [backend.http]
//! dialect = "chat_completions"   # or "messages"
//! endpoint = "https://..."
//! model = "..."
//!
//! [strategy]
//! config = "all"
//! seed = 0
//!
//! [matching]
//! mode = "centroid_distance"
//! max_mm = 10.0
//!
//! [render]
//! lobe_colors = [[230, 159, 0, 255], ...]
//! outline_color = [213, 94, 0, 255]
//! ```
//!
//! `OCC_API_KEY`, `OCC_ENDPOINT`, `OCC_MODEL` and `OCC_TEMPERATURE` override
//! the matching keys. The credential is only ever read from the environment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use occ_core::gateway::Dialect;
use occ_core::render::{DEFAULT_LOBE_COLORS, DEFAULT_OUTLINE_COLOR};
use occ_core::{MatchPolicy, MockOracleParams, PromptBuilder, StrategyConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Replay,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub keep_rate: f64,
    pub discard_rate: f64,
    pub refusal_rate: f64,
    pub conceal_off_refusal_multiplier: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        let p = MockOracleParams::perfect(0);
        MockSection {
            keep_rate: p.keep_rate,
            discard_rate: p.discard_rate,
            refusal_rate: p.refusal_rate,
            conceal_off_refusal_multiplier: p.conceal_off_refusal_multiplier,
        }
    }
}

impl MockSection {
    pub fn params(&self, seed: u64) -> MockOracleParams {
        MockOracleParams {
            keep_rate: self.keep_rate,
            discard_rate: self.discard_rate,
            refusal_rate: self.refusal_rate,
            conceal_off_refusal_multiplier: self.conceal_off_refusal_multiplier,
            rng_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSection {
    pub dialect: Dialect,
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
}

impl Default for HttpSection {
    fn default() -> Self {
        HttpSection {
            dialect: Dialect::ChatCompletions,
            endpoint: String::new(),
            model: String::new(),
            max_tokens: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub cassette: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub max_in_flight: usize,
    pub backoff_ms: Vec<u64>,
    pub mock: MockSection,
    pub http: HttpSection,
    /// Filled from `OCC_API_KEY`; never read from the file.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            cassette: None,
            record: None,
            temperature: 0.0,
            max_retries: 3,
            timeout_s: 120,
            max_in_flight: occ_core::gateway::DEFAULT_MAX_IN_FLIGHT,
            backoff_ms: vec![1000, 2000, 4000],
            mock: MockSection::default(),
            http: HttpSection::default(),
            api_key: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub config: String,
    pub seed: u64,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            config: "all".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub lobe_colors: [[u8; 4]; 5],
    pub outline_color: [u8; 4],
    pub color_names: Option<[String; 6]>,
    pub template_dir: Option<PathBuf>,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            lobe_colors: DEFAULT_LOBE_COLORS,
            outline_color: DEFAULT_OUTLINE_COLOR,
            color_names: None,
            template_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub store_root: PathBuf,
    pub bind: String,
    pub port: u16,
    pub backend: BackendSection,
    pub strategy: StrategySection,
    pub matching: MatchPolicy,
    pub render: RenderSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            store_root: PathBuf::from("studies"),
            bind: "127.0.0.1".into(),
            port: 8080,
            backend: BackendSection::default(),
            strategy: StrategySection::default(),
            matching: MatchPolicy::default(),
            render: RenderSection::default(),
        }
    }
}

impl AppConfig {
    /// Reads `path` when given (or `OCC_CONFIG`), then applies env overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let path = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("OCC_CONFIG").map(PathBuf::from));
        let mut cfg = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => AppConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(v) = get("OCC_API_KEY").filter(|v| !v.is_empty()) {
            self.backend.api_key = Some(v);
        }
        if let Some(v) = get("OCC_ENDPOINT") {
            self.backend.http.endpoint = v;
        }
        if let Some(v) = get("OCC_MODEL") {
            self.backend.http.model = v;
        }
        if let Some(v) = get("OCC_TEMPERATURE") {
            self.backend.temperature = v
                .parse()
                .with_context(|| format!("OCC_TEMPERATURE `{v}` is not a number"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.backend.temperature.is_finite() && self.backend.temperature >= 0.0) {
            bail!("temperature must be >= 0");
        }
        if self.backend.max_in_flight == 0 {
            bail!("max_in_flight must be >= 1");
        }
        self.matching.validate()?;
        self.backend.mock.params(0).validate()?;
        parse_strategy(&self.strategy.config, 0)?;
        Ok(())
    }

    pub fn prompt_builder(&self) -> anyhow::Result<PromptBuilder> {
        let mut b = PromptBuilder {
            lobe_colors: self.render.lobe_colors,
            outline_color: self.render.outline_color,
            ..PromptBuilder::default()
        };
        if let Some(names) = &self.render.color_names {
            b.color_names = names.clone();
        }
        if let Some(dir) = &self.render.template_dir {
            b.templates = occ_core::prompt::TemplateSet::from_dir(dir)?;
        }
        Ok(b)
    }
}

/// A strategy label that names one ablation column.
pub fn parse_strategy(label: &str, seed: u64) -> occ_core::Result<StrategyConfig> {
    let cfg = StrategyConfig::parse(label)?.with_seed(seed);
    if cfg.table_column().is_none() {
        return Err(occ_core::Error::Input(format!(
            "strategy `{label}` is not an ablation column; use `all` or `no-<toggle>`"
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env() {
        let text = r#"
            store_root = "/tmp/s"
            port = 9000
            [backend]
            kind = "http"
            [backend.http]
            dialect = "messages"
            endpoint = "https://example.invalid/v1"
            model = "m1"
            [matching]
            mode = "mask_iou"
            min_iou = 0.3
        "#;
        let mut cfg: AppConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.backend.kind, BackendKind::Http);
        assert_eq!(cfg.backend.http.dialect, Dialect::Messages);
        assert_eq!(cfg.matching, MatchPolicy::MaskIou { min_iou: 0.3 });
        cfg.apply_env(|k| match k {
            "OCC_MODEL" => Some("m2".into()),
            "OCC_API_KEY" => Some("secret".into()),
            "OCC_TEMPERATURE" => Some("0.5".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.backend.http.model, "m2");
        assert_eq!(cfg.backend.api_key.as_deref(), Some("secret"));
        assert_eq!(cfg.backend.temperature, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<AppConfig>("colour = 1").is_err());
        let mut cfg = AppConfig::default();
        cfg.backend.max_in_flight = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AppConfig::default();
        cfg.strategy.config = "000000".into();
        assert!(cfg.validate().is_err());
        assert!(AppConfig::default().apply_env(|_| Some("warm".into())).is_err());
    }

    #[test]
    fn strategy_labels() {
        assert_eq!(parse_strategy("no-highlight_roi", 4).unwrap().table_column(), Some(0));
        assert_eq!(parse_strategy("111111", 0).unwrap().table_column(), Some(6));
        assert!(parse_strategy("110011", 0).is_err());
    }
}
