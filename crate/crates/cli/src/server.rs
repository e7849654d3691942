//! REST surface for the review UI. All state lives in the study store; the
//! only in-memory state is the set of studies with a filter in progress.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use occ_core::eval::{evaluate_study, FilterOutcome};
use occ_core::store::StudySummary;
use occ_core::text::{MatchResult, ParseReport};
use occ_core::{
    assemble_study, locate_candidate, parse_description, BoundingBox, Decision, Error, Location, MatchPolicy,
    MetricsReport, PromptBuilder, StudyBundle, StudyStore, Verdict,
};
use serde::{Deserialize, Serialize};

use crate::backend::BackendChoice;
use crate::commands::filter_and_record;
use crate::config::{parse_strategy, AppConfig};

const UPLOAD_FILES: [&str; 8] = [
    "study.json",
    "decisions.json",
    "metrics.json",
    "volume.json",
    "volume.raw",
    "lobes.raw",
    "candidates.json",
    "truth.json",
];

struct Inner {
    store: StudyStore,
    choice: BackendChoice,
    builder: PromptBuilder,
    policy: MatchPolicy,
    default_strategy: String,
    running: Mutex<HashSet<String>>,
    // Serializes cassette appends when recording is on.
    record_lock: Mutex<()>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Input(_) | Error::MissingField(_) | Error::Schema { .. } | Error::Json(_) | Error::Csv(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            Error::Gateway(_) => (StatusCode::BAD_GATEWAY, "backend_error"),
            Error::Integrity { .. } | Error::Io { .. } | Error::Png(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub centroid: [f64; 3],
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Lobe abbreviation, or `null` for background.
    pub lobe: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudyView {
    pub study_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub description: Option<String>,
    pub parse: Option<ParseReport>,
    pub has_truth: bool,
    pub candidates: Vec<CandidateView>,
    pub verdicts: Vec<Verdict>,
    pub verdict_history: Vec<Verdict>,
}

impl StudyView {
    fn of(b: &StudyBundle) -> Self {
        StudyView {
            study_id: b.study_id.clone(),
            dims: b.volume.dims(),
            spacing: b.volume.spacing(),
            description: b.description.clone(),
            parse: b.description.as_deref().map(parse_description),
            has_truth: b.truth.is_some(),
            candidates: b
                .candidates
                .iter()
                .map(|c| CandidateView {
                    id: c.id.clone(),
                    centroid: c.centroid,
                    bbox: c.bbox,
                    confidence: c.confidence,
                    lobe: match locate_candidate(c, &b.lobes) {
                        Ok(Location::Lobe(l)) => Some(l.abbreviation().to_string()),
                        _ => None,
                    },
                })
                .collect(),
            verdicts: b.verdicts.clone(),
            verdict_history: b.verdict_history.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterResponse {
    pub study_id: String,
    pub config: String,
    pub seed: u64,
    pub verdicts: Vec<Verdict>,
    pub prefilter: BTreeMap<String, MatchResult>,
    pub n_refusal: u64,
    pub n_transport_error: u64,
}

#[derive(Debug, Deserialize)]
struct StrategyQuery {
    config: Option<String>,
    seed: Option<u64>,
    image: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct OverrideBody {
    decision: String,
    #[serde(default)]
    rationale: Option<String>,
}

async fn upload(State(s): State<AppState>, mut form: Multipart) -> ApiResult<(StatusCode, Json<StudySummary>)> {
    let mut files = BTreeMap::new();
    let mut study_id = None;
    let mut description = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::invalid(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::invalid(format!("multipart field `{name}`: {e}")))?;
        let text = || String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::invalid(format!("`{name}` is not UTF-8")));
        match name.as_str() {
            "study_id" => study_id = Some(text()?.trim().to_string()),
            "description" => description = Some(text()?),
            n if UPLOAD_FILES.contains(&n) => {
                files.insert(name, bytes.to_vec());
            }
            other => return Err(ApiError::invalid(format!("unexpected multipart field `{other}`"))),
        }
    }
    let id = match study_id {
        Some(id) => id,
        None => {
            let manifest = files.get("study.json").ok_or(Error::MissingField("study_id"))?;
            let v: serde_json::Value = serde_json::from_slice(manifest).map_err(Error::from)?;
            v.get("study_id")
                .and_then(|x| x.as_str())
                .ok_or(Error::MissingField("study_id"))?
                .to_string()
        }
    };
    blocking(move || {
        let b = assemble_study(&id, &files, description)?;
        if s.0.store.exists(&b.study_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "conflict",
                format!("study `{}` already exists", b.study_id),
            ));
        }
        s.0.store.save(&b)?;
        Ok((
            StatusCode::CREATED,
            Json(StudySummary {
                id: b.study_id.clone(),
                candidate_count: b.candidates.len(),
                has_description: b.description.is_some(),
            }),
        ))
    })
    .await
}

async fn list(State(s): State<AppState>) -> ApiResult<Json<Vec<StudySummary>>> {
    blocking(move || Ok(Json(s.0.store.list()?))).await
}

async fn show(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StudyView>> {
    blocking(move || Ok(Json(StudyView::of(&s.0.store.load(&id)?)))).await
}

async fn put_description(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> ApiResult<Json<ParseReport>> {
    if body.trim().is_empty() {
        return Err(ApiError::invalid("description must not be blank"));
    }
    blocking(move || {
        s.0.store.update(&id, |b| {
            b.description = Some(body.clone());
            Ok(())
        })?;
        Ok(Json(parse_description(&body)))
    })
    .await
}

/// Removes the study from the running set when the filter ends.
struct RunGuard(AppState, String);

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.0 .0.running.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.1);
    }
}

async fn filter(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StrategyQuery>,
) -> ApiResult<Json<FilterResponse>> {
    let mut choice = s.0.choice.clone();
    if let Some(seed) = q.seed {
        choice.seed = seed;
    }
    let config = parse_strategy(q.config.as_deref().unwrap_or(&s.0.default_strategy), choice.seed)?;
    if !s.0.store.exists(&id) {
        return Err(Error::NotFound(id).into());
    }
    let fresh = s.0.running.lock().unwrap_or_else(|p| p.into_inner()).insert(id.clone());
    if !fresh {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            format!("a filter is already running on `{id}`"),
        ));
    }
    let guard = RunGuard(s.clone(), id.clone());
    blocking(move || {
        let _guard = guard;
        let inner = &s.0;
        let mut study = inner.store.load(&id)?;
        let out: FilterOutcome = {
            let _rec = choice
                .section
                .record
                .is_some()
                .then(|| inner.record_lock.lock().unwrap_or_else(|p| p.into_inner()));
            filter_and_record(&mut study, &choice, config, &inner.builder, &inner.policy)?
        };
        inner.store.update(&id, |b| {
            b.record_verdicts(out.verdicts.clone());
            b.metrics = None;
            Ok(())
        })?;
        Ok(Json(FilterResponse {
            study_id: id,
            config: config.label(),
            seed: choice.seed,
            verdicts: out.verdicts,
            prefilter: out.prefilter,
            n_refusal: out.n_refusal,
            n_transport_error: out.n_transport_error,
        }))
    })
    .await
}

async fn render(
    State(s): State<AppState>,
    Path((id, cid)): Path<(String, String)>,
    Query(q): Query<StrategyQuery>,
) -> ApiResult<Response> {
    let seed = q.seed.unwrap_or(s.0.choice.seed);
    let config = parse_strategy(q.config.as_deref().unwrap_or(&s.0.default_strategy), seed)?;
    let k = q.image.unwrap_or(0);
    let png: Bytes = blocking(move || {
        let b = s.0.store.load(&id)?;
        let c = b
            .candidate(&cid)
            .ok_or_else(|| Error::NotFound(format!("{id}/candidates/{cid}")))?;
        let mut bundle = s.0.builder.build(&b, c, &config)?;
        if k >= bundle.images.len() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("image {k} out of {}", bundle.images.len()),
            ));
        }
        Ok(Bytes::from(bundle.images.swap_remove(k)))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn put_verdict(
    State(s): State<AppState>,
    Path((id, cid)): Path<(String, String)>,
    body: Result<Json<OverrideBody>, JsonRejection>,
) -> ApiResult<Json<Verdict>> {
    let Json(body) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let decision: Decision = body.decision.parse()?;
    blocking(move || {
        let v = s.0.store.update(&id, |b| {
            b.override_verdict(&cid, decision, body.rationale.clone().unwrap_or_default())?;
            b.metrics = None;
            Ok(b.verdict_for(&cid).cloned().expect("override recorded"))
        })?;
        Ok(Json(v))
    })
    .await
}

async fn get_metrics(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MetricsReport>> {
    blocking(move || {
        let b = s.0.store.load(&id)?;
        Ok(Json(evaluate_study(&b, &s.0.policy)?))
    })
    .await
}

async fn parse(body: String) -> Json<ParseReport> {
    Json(parse_description(&body))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", post(upload).get(list))
        .route("/studies/{id}", get(show))
        .route("/studies/{id}/description", put(put_description))
        .route("/studies/{id}/filter", post(filter))
        .route("/studies/{id}/candidates/{cid}/render", get(render))
        .route("/studies/{id}/verdicts/{cid}", put(put_verdict))
        .route("/studies/{id}/metrics", get(get_metrics))
        .route("/parse", post(parse))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

pub fn state(cfg: &AppConfig, choice: BackendChoice) -> occ_core::Result<AppState> {
    Ok(AppState(Arc::new(Inner {
        store: StudyStore::open(&cfg.store_root)?,
        choice,
        builder: cfg
            .prompt_builder()
            .map_err(|e| Error::Input(format!("{e:#}")))?,
        policy: cfg.matching,
        default_strategy: cfg.strategy.config.clone(),
        running: Mutex::new(HashSet::new()),
        record_lock: Mutex::new(()),
    })))
}

pub fn serve(cfg: AppConfig, choice: BackendChoice) -> anyhow::Result<()> {
    let state = state(&cfg, choice)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port))
            .await
            .map_err(|e| Error::Input(format!("cannot bind {}:{}: {e}", cfg.bind, cfg.port)))?;
        let addr = listener.local_addr()?;
        {
            let mut out = std::io::stdout().lock();
            writeln!(out, "listening on http://{addr}")?;
            out.flush()?;
        }
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
