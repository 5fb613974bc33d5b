//! Review service.
//!
//! Serves the anomaly records of one pipeline run and accepts review
//! verdicts. The data directory holds:
//!
//! - `anomalies.jsonl`: pipeline output (read-only here),
//! - `ledger.csv`: flow ledger the run was computed from (read-only),
//! - `trips.jsonl`: optional trip log for per-stop evidence,
//! - `journal.jsonl`: review labels and exclusions (append-only).
//!
//! Every response carries the `x-liftwatch-api` header; a request that sends
//! a different version is refused.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use liftwatch::features::{window_select, FeatureVectorR2};
use liftwatch::flowrec::{classify_stop, FlowLedger, DEFAULT_MATCH_THRESHOLD};
use liftwatch::pipeline::{AnomalyRecord, RecordStatus};
use liftwatch::review::{ExclusionEntry, ExclusionScope, Reason, ReviewLabel, ReviewStore, ScopeKind, Verdict};
use liftwatch::store::{ingest, read_anomalies, read_ledger, IngestOptions};
use liftwatch::{Error, FloorKey};

pub const API_VERSION: &str = "1";
pub const VERSION_HEADER: &str = "x-liftwatch-api";
pub const DEFAULT_PORT: u16 = 8080;

pub const ANOMALIES_FILE: &str = "anomalies.jsonl";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const TRIPS_FILE: &str = "trips.jsonl";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub match_threshold: f64,
    pub window_days: u32,
}

impl ServeConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServeConfig {
            data_dir: data_dir.into(),
            port: DEFAULT_PORT,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            window_days: liftwatch::features::DEFAULT_WINDOW_DAYS,
        }
    }
}

/// One stop at the record's floor: how many boarded and alighted.
#[derive(Debug, Clone, Serialize)]
pub struct StopExcerpt {
    #[serde(with = "liftwatch::event::iso_seconds")]
    pub timestamp: i64,
    pub boarded: usize,
    pub alighted: usize,
    pub riders_before: usize,
    pub riders_after: usize,
}

pub struct AppState {
    records: Vec<AnomalyRecord>,
    index: HashMap<String, usize>,
    ledger: FlowLedger,
    excerpts: HashMap<FloorKey, Vec<StopExcerpt>>,
    window_days: u32,
    reviews: RwLock<ReviewStore>,
}

impl AppState {
    pub fn load(config: &ServeConfig) -> liftwatch::Result<Self> {
        let dir = &config.data_dir;
        let mut records = read_anomalies(dir.join(ANOMALIES_FILE))?;
        records.sort_by(|a, b| b.r2_score.total_cmp(&a.r2_score).then_with(|| a.key.cmp(&b.key)));
        let ledger = read_ledger(dir.join(LEDGER_FILE))?;
        let excerpts = load_excerpts(&dir.join(TRIPS_FILE), &records, config)?;
        let reviews = ReviewStore::open(dir.join(JOURNAL_FILE))?;
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(AppState {
            records,
            index,
            ledger,
            excerpts,
            window_days: config.window_days,
            reviews: RwLock::new(reviews),
        })
    }
}

fn load_excerpts(
    path: &Path,
    records: &[AnomalyRecord],
    config: &ServeConfig,
) -> liftwatch::Result<HashMap<FloorKey, Vec<StopExcerpt>>> {
    let mut out: HashMap<FloorKey, Vec<StopExcerpt>> = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let wanted: HashMap<&FloorKey, &AnomalyRecord> = records.iter().map(|r| (&r.key, r)).collect();
    for ev in ingest(path, &IngestOptions::default())?.events {
        let key = ev.floor_key();
        let Some(rec) = wanted.get(&key) else { continue };
        let age = (rec.window_end - ev.date()).num_days();
        if !(0..i64::from(config.window_days)).contains(&age) {
            continue;
        }
        let m = classify_stop(&ev, config.match_threshold)?;
        out.entry(key).or_default().push(StopExcerpt {
            timestamp: ev.timestamp,
            boarded: m.boarded.len(),
            alighted: m.alighted.len(),
            riders_before: ev.pre_obs.len(),
            riders_after: ev.post_obs.len(),
        });
    }
    Ok(out)
}

pub struct ApiError(StatusCode, serde_json::Value);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Config { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Data(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.to_string() });
        if let Error::Config { field, .. } = &e {
            body["field"] = json!(field);
        }
        ApiError(status, body)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

async fn version_header(req: Request, next: Next) -> Response {
    let requested = req.headers().get(VERSION_HEADER).cloned();
    let mut resp = match requested {
        Some(v) if v.as_bytes() != API_VERSION.as_bytes() => ApiError(
            StatusCode::BAD_REQUEST,
            json!({ "error": format!("unsupported API version {:?}", v), "supported": API_VERSION }),
        )
        .into_response(),
        _ => next.run(req).await,
    };
    resp.headers_mut()
        .insert(VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    resp
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/anomalies", get(list_anomalies))
        .route("/anomalies/{id}", get(anomaly_detail))
        .route("/anomalies/{id}/review", post(submit_review))
        .route("/exclusions", get(list_exclusions).post(create_exclusion))
        .route("/exclusions/{id}", delete(delete_exclusion))
        .layer(middleware::from_fn(version_header))
        .with_state(state)
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "records": state.records.len() }))
}

#[derive(Debug, Deserialize)]
struct Paging {
    #[serde(default)]
    page: usize,
    #[serde(default = "default_per_page")]
    per_page: usize,
}

fn default_per_page() -> usize {
    50
}

#[derive(Debug, Serialize)]
struct RecordSummary<'a> {
    id: &'a str,
    key: &'a FloorKey,
    r1_score: f64,
    r2_score: f64,
    window_end: chrono::NaiveDate,
    status: RecordStatus,
}

fn status_of(reviews: &ReviewStore, id: &str) -> RecordStatus {
    if reviews.label(id).is_some() {
        RecordStatus::Reviewed
    } else {
        RecordStatus::Open
    }
}

async fn list_anomalies(
    State(state): State<Shared>,
    Query(paging): Query<Paging>,
) -> ApiResult<Json<serde_json::Value>> {
    if paging.per_page == 0 || paging.per_page > 1000 {
        return Err(Error::config("per_page", "must lie in 1..=1000").into());
    }
    let reviews = state.reviews.read().expect("review lock");
    let items: Vec<RecordSummary> = state
        .records
        .iter()
        .skip(paging.page * paging.per_page)
        .take(paging.per_page)
        .map(|r| RecordSummary {
            id: &r.id,
            key: &r.key,
            r1_score: r.r1_score,
            r2_score: r.r2_score,
            window_end: r.window_end,
            status: status_of(&reviews, &r.id),
        })
        .collect();
    Ok(Json(json!({
        "total": state.records.len(),
        "page": paging.page,
        "per_page": paging.per_page,
        "items": items,
    })))
}

fn find<'a>(state: &'a AppState, id: &str) -> ApiResult<&'a AnomalyRecord> {
    state
        .index
        .get(id)
        .map(|&i| &state.records[i])
        .ok_or_else(|| Error::NotFound(format!("anomaly record {id}")).into())
}

fn named(names: &[String], values: &[f64]) -> serde_json::Map<String, serde_json::Value> {
    names.iter().zip(values).map(|(n, v)| (n.clone(), json!(v))).collect()
}

async fn anomaly_detail(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let rec = find(&state, &id)?;
    let names = FeatureVectorR2::column_names();
    let f = &rec.feature_r2;
    let window = window_select(&state.ledger, rec.window_end, state.window_days)?;
    let flow: Vec<_> = window
        .series(&rec.key)
        .iter()
        .map(|a| json!({ "date": a.key.date, "in_count": a.in_count, "out_count": a.out_count }))
        .collect();
    let reviews = state.reviews.read().expect("review lock");
    let mut record = serde_json::to_value(rec).map_err(Error::from)?;
    record["status"] = json!(status_of(&reviews, &rec.id));
    Ok(Json(json!({
        "record": record,
        "label": reviews.label(&rec.id),
        "hour_histogram": named(&names[57..81], f.hours()),
        "attribute_class_means": named(&names[13..35], f.classes()),
        "attribute_score_means": named(&names[35..57], f.scores()),
        "flow_series": flow,
        "stops": state.excerpts.get(&rec.key).cloned().unwrap_or_default(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewRequest {
    verdict: Verdict,
    reason: Reason,
    #[serde(default)]
    note: String,
    reviewer_id: String,
    #[serde(default, with = "opt_iso")]
    reviewed_at: Option<i64>,
    #[serde(default)]
    scope: ScopeKind,
}

mod opt_iso {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<i64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "liftwatch::event::iso_seconds")] i64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

fn now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "body".into());
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "error": msg, "field": field }),
        )
    })
}

async fn submit_review(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let rec = find(&state, &id)?;
    let req: ReviewRequest = parse_body(&body)?;
    let label = ReviewLabel {
        record_id: rec.id.clone(),
        verdict: req.verdict,
        reason: req.reason,
        note: req.note,
        reviewer_id: req.reviewer_id,
        reviewed_at: req.reviewed_at.unwrap_or_else(now),
        scope: req.scope,
    };
    let mut reviews = state.reviews.write().expect("review lock");
    let exclusion = reviews.submit_label(label.clone(), &rec.key)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "label": label, "exclusion": exclusion })),
    ))
}

#[derive(Debug, Deserialize)]
struct ExclusionQuery {
    #[serde(default)]
    history: bool,
}

#[derive(Debug, Serialize)]
struct ExclusionView<'a> {
    #[serde(flatten)]
    entry: &'a ExclusionEntry,
    #[serde(skip_serializing_if = "Option::is_none")]
    deleted_at: Option<String>,
}

async fn list_exclusions(State(state): State<Shared>, Query(q): Query<ExclusionQuery>) -> Json<serde_json::Value> {
    let reviews = state.reviews.read().expect("review lock");
    let items: Vec<ExclusionView> = reviews
        .history()
        .iter()
        .map(|e| ExclusionView {
            entry: e,
            deleted_at: reviews.deleted_at(e.id).map(liftwatch::event::iso_seconds::format),
        })
        .filter(|v| q.history || v.deleted_at.is_none())
        .collect();
    Json(json!({ "items": items }))
}

#[derive(Debug, Deserialize)]
struct ExclusionRequest {
    #[serde(flatten)]
    scope: ExclusionScope,
    reason: Reason,
}

async fn create_exclusion(
    State(state): State<Shared>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<ExclusionEntry>)> {
    let req: ExclusionRequest = parse_body(&body)?;
    let mut reviews = state.reviews.write().expect("review lock");
    let entry = reviews.create_exclusion(req.scope, req.reason, now())?;
    Ok((StatusCode::CREATED, Json(entry)))
}

async fn delete_exclusion(State(state): State<Shared>, UrlPath(id): UrlPath<u64>) -> ApiResult<StatusCode> {
    let mut reviews = state.reviews.write().expect("review lock");
    reviews.delete_exclusion(id, now())?;
    Ok(StatusCode::NO_CONTENT)
}

/// Loads the data directory and serves until the process is stopped.
pub async fn serve(config: ServeConfig) -> liftwatch::Result<()> {
    let state = Arc::new(AppState::load(&config)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::data(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(%addr, records = state.records.len(), "review service listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::data(format!("server error: {e}")))
}
