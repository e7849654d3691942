use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use occ_core::gateway::{Backoff, GatewayError, HttpBackend, HttpConfig, RecordingBackend, ReplayBackend};
use occ_core::{Backend, Gateway, MatchPolicy, MockBackend, StudyBundle};

use crate::config::{BackendKind, BackendSection};

/// Backend selection after CLI flags have been folded into the config.
#[derive(Clone, Debug)]
pub struct BackendChoice {
    pub section: BackendSection,
    pub seed: u64,
}

impl BackendChoice {
    pub fn new(mut section: BackendSection, kind: Option<BackendKind>, cassette: Option<PathBuf>, record: Option<PathBuf>, seed: u64) -> Self {
        if let Some(k) = kind {
            section.kind = k;
        }
        if cassette.is_some() {
            section.cassette = cassette;
        }
        if record.is_some() {
            section.record = record;
        }
        BackendChoice { section, seed }
    }

    /// A gateway for `studies`. The mock backend learns ground truth for
    /// exactly these studies; other backends ignore them.
    pub fn gateway(&self, studies: &[StudyBundle], policy: &MatchPolicy) -> occ_core::Result<Gateway> {
        let s = &self.section;
        let inner: Arc<dyn Backend> = match s.kind {
            BackendKind::Mock => Arc::new(MockBackend::from_studies(s.mock.params(self.seed), studies, policy)?),
            BackendKind::Replay => {
                let path = s
                    .cassette
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("replay backend needs a cassette path".into()))?;
                Arc::new(ReplayBackend::open(path)?)
            }
            BackendKind::Http => Arc::new(HttpBackend::new(HttpConfig {
                dialect: s.http.dialect,
                endpoint: s.http.endpoint.clone(),
                model: s.http.model.clone(),
                api_key: s.api_key.clone(),
                max_tokens: s.http.max_tokens,
            })?),
        };
        let backend: Arc<dyn Backend> = match &s.record {
            Some(path) => Arc::new(RecordingBackend::new(inner, path)?),
            None => inner,
        };
        Ok(Gateway::new(backend)
            .with_backoff(Backoff {
                delays: s.backoff_ms.iter().map(|&ms| Duration::from_millis(ms)).collect(),
            })
            .with_max_in_flight(s.max_in_flight))
    }

    pub fn filter_options(&self) -> (f64, u32, u64) {
        (self.section.temperature, self.section.max_retries, self.section.timeout_s)
    }
}
