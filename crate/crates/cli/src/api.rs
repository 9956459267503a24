// SPDX-License-Identifier: Apache-2.0

//! HTTP control plane. Everything lives under `/api/v1`; `/ui` serves the
//! console's static files.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use flowforge_core::control::flow::has_errors;
use flowforge_core::control::{validate_flow, FlowDefinition};
use flowforge_core::distribution::TopicError;
use flowforge_core::engine::processor::Properties;
use flowforge_core::engine::{Engine, EngineError};
use flowforge_core::model::ProvenanceEventType;
use flowforge_core::repo::{ProvenanceQuery, RepoError};

/// How often the event stream pushes a full status snapshot.
pub const SNAPSHOT_INTERVAL: Duration = Duration::from_secs(5);

const MAX_RECORDS: usize = 10_000;
const MAX_QUEUE_LISTING: usize = 100;

pub struct ApiConfig {
    /// Bearer token; `None` leaves the API open.
    pub token: Option<String>,
    pub ui_dir: PathBuf,
}

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    token: Option<Arc<str>>,
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use StatusCode as S;
        let (status, kind) = match &e {
            EngineError::InvalidFlow(diags) => {
                return ApiError {
                    status: S::BAD_REQUEST,
                    kind: "invalid_flow",
                    message: serde_json::to_string(diags).unwrap_or_default(),
                }
            }
            EngineError::UnknownComponent(_) => (S::NOT_FOUND, "unknown_component"),
            EngineError::UnknownEvent(_) => (S::NOT_FOUND, "unknown_event"),
            EngineError::StartFailed { .. } => (S::CONFLICT, "start_failed"),
            EngineError::NotStopped(_) => (S::CONFLICT, "not_stopped"),
            EngineError::ConnectionNotEmpty { .. } => (S::CONFLICT, "connection_not_empty"),
            EngineError::ContentPurged(_) => (S::GONE, "content_purged"),
            EngineError::ConnectionGone(_) => (S::CONFLICT, "connection_gone"),
            EngineError::NotReplayable(_) => (S::CONFLICT, "not_replayable"),
            EngineError::Crashed => (S::SERVICE_UNAVAILABLE, "crashed"),
            EngineError::Repo(RepoError::InvalidQuery) => (S::BAD_REQUEST, "invalid_query"),
            EngineError::Repo(RepoError::UnknownUuid(_)) => (S::NOT_FOUND, "unknown_flowfile"),
            EngineError::Topic(TopicError::UnknownTopic(_) | TopicError::UnknownPartition { .. }) => {
                (S::NOT_FOUND, "unknown_topic")
            }
            EngineError::Topic(TopicError::OffsetTrimmed { .. }) => (S::GONE, "offset_trimmed"),
            EngineError::Config(_) => (S::BAD_REQUEST, "config"),
            EngineError::Repo(_) | EngineError::Topic(_) => (S::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<TopicError> for ApiError {
    fn from(e: TopicError) -> Self {
        EngineError::Topic(e).into()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(engine: Arc<Engine>, config: ApiConfig) -> Router {
    let state = AppState {
        engine,
        token: config.token.map(Arc::from),
    };
    let api = Router::new()
        .route("/flow", get(get_flow).post(post_flow))
        .route("/processors/:id/start", post(start_processor))
        .route("/processors/:id/stop", post(stop_processor))
        .route("/processors/:id/properties", put(put_properties))
        .route("/status", get(get_status))
        .route("/connections/:id", get(get_connection))
        .route("/provenance", get(get_provenance))
        .route("/provenance/:event/content", get(get_content))
        .route("/provenance/:event/replay", post(post_replay))
        .route("/lineage/:uuid", get(get_lineage))
        .route("/topics", get(get_topics))
        .route("/topics/:topic/partitions/:partition/records", get(get_records))
        .route("/events", get(get_events))
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state);
    Router::new()
        .nest("/api/v1", api)
        .nest_service("/ui", ServeDir::new(config.ui_dir).append_index_html_on_directories(true))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    engine: Arc<Engine>,
    config: ApiConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine, config))
        .with_graceful_shutdown(shutdown)
        .await
}

fn token_matches(expected: &str, headers: &HeaderMap, query: Option<&str>) -> bool {
    let header = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if header == Some(expected) {
        return true;
    }
    // EventSource cannot set headers, so the stream also accepts ?token=
    query
        .into_iter()
        .flat_map(|q| q.split('&'))
        .filter_map(|kv| kv.strip_prefix("token="))
        .any(|t| t == expected)
}

async fn authorize(State(state): State<AppState>, req: Request, next: Next) -> Response {
    match &state.token {
        Some(t) if !token_matches(t, req.headers(), req.uri().query()) => {
            ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response()
        }
        _ => next.run(req).await,
    }
}

async fn get_flow(State(s): State<AppState>) -> Json<FlowDefinition> {
    Json(s.engine.flow())
}

/// Accepts YAML or JSON (JSON being a subset of YAML).
async fn post_flow(State(s): State<AppState>, body: String) -> ApiResult<Json<Value>> {
    let def = FlowDefinition::from_yaml(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "parse", e))?;
    let diags = validate_flow(&def, s.engine.registry());
    if has_errors(&diags) {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_flow",
            message: serde_json::to_string(&diags).unwrap_or_default(),
        });
    }
    s.engine.load_flow(def)?;
    Ok(Json(json!({"loaded": true, "diagnostics": diags})))
}

async fn start_processor(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    s.engine.start_component(&id)?;
    Ok(Json(json!({"id": id, "state": "RUNNING"})))
}

async fn stop_processor(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    s.engine.stop_component(&id)?;
    Ok(Json(json!({"id": id, "state": "STOPPED"})))
}

async fn put_properties(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(props): Json<Properties>,
) -> ApiResult<Json<Value>> {
    s.engine.update_properties(&id, props)?;
    Ok(Json(json!({"id": id, "updated": true})))
}

async fn get_status(State(s): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(s.engine.status()).unwrap())
}

async fn get_connection(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let status = s
        .engine
        .status()
        .connections
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| ApiError::from(EngineError::UnknownComponent(id.clone())))?;
    let graph = s.engine.graph();
    let queued = graph.connection(&id).map(|c| c.list(MAX_QUEUE_LISTING)).unwrap_or_default();
    Ok(Json(json!({"status": status, "queued": queued})))
}

#[derive(Deserialize, Default)]
struct ProvenanceParams {
    uuid: Option<String>,
    component: Option<String>,
    /// Comma-separated event type names.
    #[serde(rename = "type")]
    event_type: Option<String>,
    from: Option<i64>,
    to: Option<i64>,
    limit: Option<usize>,
}

async fn get_provenance(State(s): State<AppState>, Query(p): Query<ProvenanceParams>) -> ApiResult<Json<Value>> {
    let event_types = match &p.event_type {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|t| {
                    ProvenanceEventType::parse(t.trim())
                        .ok_or_else(|| ApiError::bad_request(format!("unknown event type '{t}'")))
                })
                .collect::<ApiResult<BTreeSet<_>>>()?,
        ),
    };
    let q = ProvenanceQuery {
        flowfile_uuid: p.uuid,
        component_id: p.component,
        event_types,
        time_range: match (p.from, p.to) {
            (None, None) => None,
            (f, t) => Some((f.unwrap_or(i64::MIN), t.unwrap_or(i64::MAX))),
        },
        limit: p.limit.unwrap_or(1000),
        allow_all: true,
    };
    let events = s.engine.query(&q)?;
    Ok(Json(json!({"events": events})))
}

fn parse_event(raw: &str) -> ApiResult<u64> {
    raw.parse().map_err(|_| ApiError::bad_request(format!("bad event id '{raw}'")))
}

async fn get_content(State(s): State<AppState>, Path(event): Path<String>) -> ApiResult<Response> {
    let bytes = s.engine.download_content(parse_event(&event)?)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], Bytes::from(bytes)).into_response())
}

async fn post_replay(State(s): State<AppState>, Path(event): Path<String>) -> ApiResult<Json<Value>> {
    let outcome = s.engine.replay(parse_event(&event)?)?;
    Ok(Json(serde_json::to_value(outcome).unwrap()))
}

async fn get_lineage(State(s): State<AppState>, Path(uuid): Path<String>) -> ApiResult<Json<Value>> {
    let lineage = s.engine.lineage(&uuid)?;
    Ok(Json(serde_json::to_value(lineage).unwrap()))
}

async fn get_topics(State(s): State<AppState>) -> Json<Value> {
    Json(json!({"topics": s.engine.topics().topics()}))
}

#[derive(Deserialize)]
struct RecordParams {
    from: Option<u64>,
    max: Option<usize>,
}

async fn get_records(
    State(s): State<AppState>,
    Path((topic, partition)): Path<(String, u32)>,
    Query(p): Query<RecordParams>,
) -> ApiResult<Json<Value>> {
    let log = s.engine.topics();
    let (head, tail) = log.offsets(&topic, partition)?;
    let from = p.from.unwrap_or(head);
    let records = log.fetch(&topic, partition, from, p.max.unwrap_or(100).min(MAX_RECORDS))?;
    let records: Vec<Value> = records
        .into_iter()
        .map(|r| {
            json!({
                "offset": r.offset,
                "timestamp": r.timestamp,
                "key": r.key.as_deref().map(|k| B64.encode(k)),
                "value": B64.encode(&r.value),
                "value_text": String::from_utf8(r.value).ok(),
            })
        })
        .collect();
    Ok(Json(json!({"topic": topic, "partition": partition, "head": head, "tail": tail, "records": records})))
}

fn status_event(engine: &Engine) -> Event {
    Event::default()
        .event("status")
        .json_data(engine.status())
        .expect("status serializes")
}

async fn get_events(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let (tx, rx) = mpsc::unbounded_channel::<Event>();
    let _ = tx.send(status_event(&s.engine));

    let engine_events = s.engine.subscribe();
    let forward = tx.clone();
    std::thread::spawn(move || loop {
        match engine_events.recv_timeout(Duration::from_secs(1)) {
            Ok(ev) => {
                let e = Event::default().event("queue_full").json_data(&ev).expect("event serializes");
                if forward.send(e).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) if !forward.is_closed() => {}
            Err(_) => return,
        }
    });

    let engine = s.engine.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(SNAPSHOT_INTERVAL);
        tick.tick().await;
        loop {
            tick.tick().await;
            if tx.send(status_event(&engine)).is_err() {
                return;
            }
        }
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok(e), rx)) });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
