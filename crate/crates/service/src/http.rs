//! HTTP/JSON surface. Bodies are parsed by hand so that every malformed
//! request is a 400 with a message.

use std::sync::Arc;

use adrag_core::ekb::{refresh, stage_synthetic, synth_generate, FeedbackSource, PolicySpec, RecordStatus};
use adrag_core::par::ExecMode;
use adrag_core::{Error as CoreError, Label, Source};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metrics::scrape_text;
use crate::state::{ClassifyError, RecordView, ServiceState};

pub type Shared = Arc<ServiceState>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::NotConfident(_) | CoreError::RecordClosed { .. } => StatusCode::CONFLICT,
            CoreError::UnknownRecord(_) => StatusCode::NOT_FOUND,
            CoreError::EmptyText
            | CoreError::InvalidRetrieval(_)
            | CoreError::InvalidBand { .. }
            | CoreError::InvalidConfig(_)
            | CoreError::Generator { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/classify", post(classify))
        .route("/v1/feedback", post(feedback).get(list_feedback))
        .route("/v1/kb/entries", get(entries))
        .route("/v1/kb/search", post(search))
        .route("/v1/kb/pending", get(pending))
        .route("/v1/kb/promote", post(promote))
        .route("/v1/kb/reject", post(reject))
        .route("/v1/kb/refresh", post(do_refresh))
        .route("/v1/kb/policy-run", post(policy_run))
        .route("/v1/metrics", get(metrics))
        .route("/metrics", get(scrape))
        .with_state(state)
}

#[derive(Deserialize)]
struct ClassifyRequest {
    text: String,
}

async fn classify(State(s): State<Shared>, body: Bytes) -> Response {
    let req: ClassifyRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match s.classify(&req.text) {
        Ok(r) => Json(r).into_response(),
        Err(ClassifyError::NoModel) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded").into_response(),
        Err(ClassifyError::EmptyText) => ApiError::bad_request("text must be nonempty").into_response(),
        Err(ClassifyError::Core(e)) => {
            s.metrics.record_error();
            ApiError::from(e).into_response()
        }
    }
}

#[derive(Deserialize)]
struct FeedbackRequest {
    text: String,
    label: String,
    #[serde(default)]
    source: Option<String>,
}

async fn feedback(State(s): State<Shared>, body: Bytes) -> ApiResult<RecordView> {
    let req: FeedbackRequest = parse(&body)?;
    let label: Label = req
        .label
        .parse()
        .map_err(|_| ApiError::bad_request(format!("invalid label {:?}; expected safe or unsafe", req.label)))?;
    let source: FeedbackSource = match req.source.as_deref() {
        None => FeedbackSource::EndUser,
        Some(src) => src.parse().map_err(|e: CoreError| ApiError::bad_request(e.to_string()))?,
    };
    let rec = s.feedback.submit(&req.text, label, source)?;
    Ok(Json(RecordView::new(rec, s.feedback.k())))
}

#[derive(Deserialize)]
struct StatusFilter {
    status: Option<String>,
}

fn parse_status(raw: Option<&str>) -> Result<Option<RecordStatus>, ApiError> {
    match raw {
        None => Ok(None),
        Some("pending") => Ok(Some(RecordStatus::Pending)),
        Some("accepted") => Ok(Some(RecordStatus::Accepted)),
        Some("rejected") => Ok(Some(RecordStatus::Rejected)),
        Some(other) => Err(ApiError::bad_request(format!("unknown status {other:?}"))),
    }
}

#[derive(Serialize)]
struct RecordList {
    k: usize,
    records: Vec<RecordView>,
}

fn record_list(s: &ServiceState, status: Option<RecordStatus>) -> RecordList {
    let k = s.feedback.k();
    RecordList {
        k,
        records: s.feedback.list(status).into_iter().map(|r| RecordView::new(r, k)).collect(),
    }
}

async fn list_feedback(State(s): State<Shared>, Query(f): Query<StatusFilter>) -> ApiResult<RecordList> {
    let status = parse_status(f.status.as_deref())?;
    Ok(Json(record_list(&s, status)))
}

async fn pending(State(s): State<Shared>) -> Json<RecordList> {
    Json(record_list(&s, Some(RecordStatus::Pending)))
}

#[derive(Serialize)]
struct EntryView {
    id: u64,
    text: String,
    label: Label,
    source: Source,
    timestamp: i64,
    confidence: f64,
}

#[derive(Serialize)]
struct EntryPage {
    epoch: u64,
    total: usize,
    staged: usize,
    entries: Vec<EntryView>,
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn entries(State(s): State<Shared>, Query(p): Query<Page>) -> Json<EntryPage> {
    let snap = s.kb.snapshot();
    let entries = snap
        .entries()
        .skip(p.offset.unwrap_or(0))
        .take(p.limit.unwrap_or(100).min(10_000))
        .map(|e| EntryView {
            id: e.id,
            text: e.text.clone(),
            label: e.label,
            source: e.meta.source,
            timestamp: e.meta.timestamp,
            confidence: e.meta.confidence,
        })
        .collect();
    Json(EntryPage {
        epoch: snap.epoch(),
        total: snap.len(),
        staged: s.kb.staged_len(),
        entries,
    })
}

#[derive(Deserialize)]
struct SearchRequest {
    probe: String,
    #[serde(default = "default_search_k")]
    k: usize,
    /// Lower score bound; unbounded when absent.
    #[serde(default)]
    min_score: Option<f64>,
}

fn default_search_k() -> usize {
    10
}

#[derive(Serialize)]
struct SearchHit {
    id: u64,
    text: String,
    label: Label,
    source: Source,
    similarity: f64,
}

#[derive(Serialize)]
struct SearchResponse {
    epoch: u64,
    results: Vec<SearchHit>,
}

async fn search(State(s): State<Shared>, body: Bytes) -> ApiResult<SearchResponse> {
    let req: SearchRequest = parse(&body)?;
    if req.probe.trim().is_empty() {
        return Err(ApiError::bad_request("probe must be nonempty"));
    }
    let snap = s.kb.snapshot();
    let q = snap.encoder().encode(&req.probe);
    let ctx = snap.retrieve_min_score(
        &q,
        req.k.min(1000),
        req.min_score.unwrap_or(f64::NEG_INFINITY),
        &[],
        ExecMode::default(),
    );
    let results = ctx
        .items
        .iter()
        .filter_map(|it| {
            snap.get(it.entry_id).map(|e| SearchHit {
                id: e.id,
                text: e.text.clone(),
                label: e.label,
                source: e.meta.source,
                similarity: it.score,
            })
        })
        .collect();
    Ok(Json(SearchResponse {
        epoch: snap.epoch(),
        results,
    }))
}

#[derive(Deserialize)]
struct TextRequest {
    text: String,
}

#[derive(Serialize)]
struct PromoteResponse {
    entry_id: u64,
    record: RecordView,
    /// The entry becomes retrievable at the next refresh.
    visible_after_refresh: bool,
}

async fn promote(State(s): State<Shared>, body: Bytes) -> ApiResult<PromoteResponse> {
    let req: TextRequest = parse(&body)?;
    let (id, rec) = s.feedback.promote(&req.text, &s.kb)?;
    Ok(Json(PromoteResponse {
        entry_id: id,
        record: RecordView::new(rec, s.feedback.k()),
        visible_after_refresh: true,
    }))
}

async fn reject(State(s): State<Shared>, body: Bytes) -> ApiResult<RecordView> {
    let req: TextRequest = parse(&body)?;
    let rec = s.feedback.reject(&req.text)?;
    Ok(Json(RecordView::new(rec, s.feedback.k())))
}

#[derive(Serialize)]
struct RefreshResponse {
    epoch: u64,
    entries: usize,
}

async fn do_refresh(State(s): State<Shared>) -> Json<RefreshResponse> {
    let epoch = refresh(&s.kb);
    Json(RefreshResponse {
        epoch,
        entries: s.kb.snapshot().len(),
    })
}

#[derive(Deserialize)]
struct PolicyRunRequest {
    policy: PolicySpec,
    n: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct PolicyRunResponse {
    policy_id: String,
    entry_ids: Vec<u64>,
    texts: Vec<String>,
    label: Label,
}

async fn policy_run(State(s): State<Shared>, body: Bytes) -> ApiResult<PolicyRunResponse> {
    let req: PolicyRunRequest = parse(&body)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let pairs = synth_generate(&req.policy, s.generator.as_ref(), req.n, &mut rng)?;
    let ids = stage_synthetic(&s.kb, &pairs)?;
    Ok(Json(PolicyRunResponse {
        policy_id: req.policy.policy_id.clone(),
        entry_ids: ids,
        texts: pairs.into_iter().map(|(t, _)| t).collect(),
        label: req.policy.target_label,
    }))
}

async fn metrics(State(s): State<Shared>) -> Json<crate::metrics::MetricsReport> {
    Json(s.metrics.report(s.cfg.tau_ms, s.kb.epoch()))
}

async fn scrape(State(s): State<Shared>) -> impl IntoResponse {
    let r = s.metrics.report(s.cfg.tau_ms, s.kb.epoch());
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], scrape_text(&r))
}

/// Serves until `shutdown` resolves.
pub async fn serve<F>(state: Shared, listener: tokio::net::TcpListener, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
