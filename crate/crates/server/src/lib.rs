//! HTTP JSON service over an [`Explorer`]. Every route lives under `/api`;
//! every error response carries an `ErrorBody`. [`dispatch`] answers the
//! same requests in-process.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use saeatlas_core::api::{
    ApiError, ApiResult, CoactivateRequest, Explorer, ProbeRequest, QueryRequest, SteerRequest,
};
use saeatlas_core::atlas::Zoom;
use saeatlas_core::lab::ProbeResult;
use saeatlas_core::retrieval::ActiveText;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

pub const SESSION_HEADER: &str = "x-session-id";
const PROBE_CACHE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeConfig {
    /// Concurrent compute jobs.
    pub workers: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { workers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionQuery {
    pub query_id: String,
    pub raw_text: String,
    pub suggestion: String,
    pub active: ActiveText,
    pub active_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub query: Option<SessionQuery>,
    pub selected_sae: Option<String>,
    pub selected_feature: Option<usize>,
    /// Most recent probes, newest last.
    pub probes: Vec<ProbeResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionUpdate {
    #[serde(default)]
    pub selected_sae: Option<String>,
    #[serde(default)]
    pub selected_feature: Option<usize>,
}

pub struct AppState {
    pub explorer: Explorer,
    sessions: RwLock<HashMap<String, SessionState>>,
    next_session: AtomicU64,
    workers: Semaphore,
}

impl AppState {
    pub fn new(explorer: Explorer, config: ServeConfig) -> Arc<Self> {
        Arc::new(AppState {
            explorer,
            sessions: RwLock::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            workers: Semaphore::new(config.workers.max(1)),
        })
    }

    fn update_session(&self, id: &str, f: impl FnOnce(&mut SessionState)) -> ApiResult<()> {
        let mut sessions = self.sessions.write().expect("session lock");
        let s = sessions.get_mut(id).ok_or_else(|| session_not_found(id))?;
        f(s);
        Ok(())
    }
}

fn session_not_found(id: &str) -> ApiError {
    ApiError::new(404, "session_not_found", format!("no session {id:?}"))
}

struct Failure(ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(e)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!("{}", self.0);
        }
        (status, Json(self.0.body)).into_response()
    }
}

type Reply<T> = Result<Json<T>, Failure>;

/// Runs `f` on the blocking pool once a worker slot is free.
async fn compute<T, F>(state: &Arc<AppState>, f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce(&Explorer) -> ApiResult<T> + Send + 'static,
{
    let _permit = state
        .workers
        .acquire()
        .await
        .map_err(|_| ApiError::new(503, "shutting_down", "service is shutting down"))?;
    let st = Arc::clone(state);
    let out = tokio::task::spawn_blocking(move || f(&st.explorer))
        .await
        .map_err(|e| ApiError::new(500, "internal", format!("worker failed: {e}")))?;
    Ok(Json(out?))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(400, "malformed_json", "request body is not valid JSON for this endpoint")
            .with_detail(serde_json::json!({ "error": e.to_string() }))
    })
}

fn parse_feature_id(raw: &str) -> ApiResult<usize> {
    raw.parse()
        .map_err(|_| ApiError::new(400, "invalid_feature_id", format!("feature id {raw:?} is not a non-negative integer")))
}

fn session_id(headers: &HeaderMap) -> Option<String> {
    headers.get(SESSION_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string)
}

fn parse_k(params: &HashMap<String, String>) -> ApiResult<Option<usize>> {
    params
        .get("k")
        .map(|k| k.parse().map_err(|_| ApiError::bad_request(format!("k={k:?} is not a positive integer"))))
        .transpose()
}

/// `selection=3,17,42`; an empty value selects nothing.
pub fn parse_selection(raw: Option<&String>) -> ApiResult<Option<Vec<u64>>> {
    raw.map(|s| {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("selection entry {p:?} is not a segment id")))
            })
            .collect()
    })
    .transpose()
}

async fn health(State(st): State<Arc<AppState>>) -> Reply<saeatlas_core::api::Health> {
    Ok(Json(st.explorer.health()))
}

async fn saes(State(st): State<Arc<AppState>>, Query(params): Query<HashMap<String, String>>) -> Reply<saeatlas_core::api::SaeList> {
    let q = params.get("q").cloned();
    compute(&st, move |e| e.saes(q.as_deref())).await
}

async fn query(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Reply<saeatlas_core::api::QueryResponse> {
    let req: QueryRequest = parse_body(&body)?;
    let session = session_id(&headers);
    if let Some(id) = &session {
        st.update_session(id, |_| ())?;
    }
    let Json(resp) = compute(&st, move |e| e.query(&req)).await?;
    if let Some(id) = session {
        st.update_session(&id, |s| {
            s.query = Some(SessionQuery {
                query_id: resp.query_id.clone(),
                raw_text: resp.raw_text.clone(),
                suggestion: resp.suggestion.clone(),
                active: resp.active,
                active_text: resp.active_text.clone(),
            })
        })?;
    }
    Ok(Json(resp))
}

fn atlas_params(params: &HashMap<String, String>) -> ApiResult<(Zoom, Option<String>, Option<usize>)> {
    let zoom = match params.get("zoom") {
        Some(z) => Zoom::parse(z)
            .map_err(|_| ApiError::new(400, "invalid_zoom", format!("zoom {z:?} is not one of far, mid, near")))?,
        None => Zoom::Far,
    };
    Ok((zoom, params.get("q").cloned(), parse_k(params)?))
}

async fn atlas(
    State(st): State<Arc<AppState>>,
    Path(sae): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Reply<saeatlas_core::api::AtlasResponse> {
    let (zoom, q, k) = atlas_params(&params)?;
    compute(&st, move |e| e.atlas(&sae, zoom, q.as_deref(), k)).await
}

async fn feature(
    State(st): State<Arc<AppState>>,
    Path((sae, fid)): Path<(String, String)>,
    Query(params): Query<HashMap<String, String>>,
) -> Reply<saeatlas_core::api::FeatureResponse> {
    let fid = parse_feature_id(&fid)?;
    let selection = parse_selection(params.get("selection"))?;
    compute(&st, move |e| e.feature(&sae, fid, selection.as_deref())).await
}

async fn probe(
    State(st): State<Arc<AppState>>,
    Path((sae, fid)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Reply<ProbeResult> {
    let fid = parse_feature_id(&fid)?;
    let req: ProbeRequest = parse_body(&body)?;
    let session = session_id(&headers);
    let sae_id = sae.clone();
    let Json(result) = compute(&st, move |e| e.probe(&sae, fid, &req)).await?;
    if let Some(id) = session {
        st.update_session(&id, |s| {
            s.selected_sae = Some(sae_id);
            s.selected_feature = Some(fid);
            s.probes.push(result.clone());
            if s.probes.len() > PROBE_CACHE {
                s.probes.remove(0);
            }
        })?;
    }
    Ok(Json(result))
}

async fn coactivate(
    State(st): State<Arc<AppState>>,
    Path((sae, fid)): Path<(String, String)>,
    body: Bytes,
) -> Reply<saeatlas_core::lab::CoActivationSet> {
    let fid = parse_feature_id(&fid)?;
    let req: CoactivateRequest = parse_body(&body)?;
    compute(&st, move |e| e.coactivate(&sae, fid, &req)).await
}

async fn steer(
    State(st): State<Arc<AppState>>,
    Path((sae, fid)): Path<(String, String)>,
    body: Bytes,
) -> Reply<saeatlas_core::api::SteerResponse> {
    let fid = parse_feature_id(&fid)?;
    let req: SteerRequest = parse_body(&body)?;
    compute(&st, move |e| e.steer(&sae, fid, &req)).await
}

async fn create_session(State(st): State<Arc<AppState>>) -> (StatusCode, Json<SessionState>) {
    let n = st.next_session.fetch_add(1, Ordering::Relaxed);
    let state = SessionState {
        session_id: format!("s-{n:06}"),
        query: None,
        selected_sae: None,
        selected_feature: None,
        probes: Vec::new(),
    };
    st.sessions.write().expect("session lock").insert(state.session_id.clone(), state.clone());
    (StatusCode::CREATED, Json(state))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Reply<SessionState> {
    let sessions = st.sessions.read().expect("session lock");
    Ok(Json(sessions.get(&id).cloned().ok_or_else(|| session_not_found(&id))?))
}

async fn update_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Reply<SessionState> {
    let update: SessionUpdate = parse_body(&body)?;
    if let Some(sae) = &update.selected_sae {
        let pack = st
            .explorer
            .registry
            .pack(sae)
            .map_err(|_| ApiError::new(404, "sae_not_found", format!("no SAE with id {sae:?}")))?;
        if let Some(f) = update.selected_feature {
            pack.check_feature(f).map_err(ApiError::from)?;
        }
    } else if update.selected_feature.is_some() {
        return Err(ApiError::bad_request("selected_feature requires selected_sae").into());
    }
    let mut out = None;
    st.update_session(&id, |s| {
        s.selected_sae = update.selected_sae.clone();
        s.selected_feature = update.selected_feature;
        out = Some(s.clone());
    })?;
    Ok(Json(out.expect("updated")))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, Failure> {
    match st.sessions.write().expect("session lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(session_not_found(&id).into()),
    }
}

async fn not_found() -> Failure {
    Failure(ApiError::new(404, "route_not_found", "no such endpoint"))
}

async fn method_not_allowed() -> Failure {
    Failure(ApiError::new(405, "method_not_allowed", "method not allowed on this endpoint"))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/saes", get(saes))
        .route("/query", post(query))
        .route("/saes/{sae}/atlas", get(atlas))
        .route("/saes/{sae}/features/{fid}", get(feature))
        .route("/saes/{sae}/features/{fid}/probe", post(probe))
        .route("/saes/{sae}/features/{fid}/coactivate", post(coactivate))
        .route("/saes/{sae}/features/{fid}/steer", post(steer))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).patch(update_session).delete(delete_session));
    Router::new()
        .nest("/api", api)
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

/// Goes through JSON text so `f32` fields read back exactly as an HTTP
/// client sees them.
fn to_value<T: Serialize>(v: ApiResult<T>) -> ApiResult<serde_json::Value> {
    let internal = |e: serde_json::Error| ApiError::new(500, "internal", e.to_string());
    let text = serde_json::to_string(&v?).map_err(internal)?;
    serde_json::from_str(&text).map_err(internal)
}

/// Answers one stateless API request without HTTP. `target` is the path
/// with an optional query string, e.g. `/api/saes/toy-l1/atlas?zoom=far`.
pub fn dispatch(explorer: &Explorer, method: &str, target: &str, body: &[u8]) -> ApiResult<serde_json::Value> {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let params: HashMap<String, String> = serde_urlencoded::from_str(query)
        .map_err(|e| ApiError::bad_request(format!("malformed query string: {e}")))?;
    let body = Bytes::copy_from_slice(body);
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    let method = method.to_ascii_uppercase();
    match (method.as_str(), segments.as_slice()) {
        ("GET", ["api", "health"]) => to_value(Ok(explorer.health())),
        ("GET", ["api", "saes"]) => to_value(explorer.saes(params.get("q").map(String::as_str))),
        ("POST", ["api", "query"]) => to_value(explorer.query(&parse_body(&body)?)),
        ("GET", ["api", "saes", sae, "atlas"]) => {
            let (zoom, q, k) = atlas_params(&params)?;
            to_value(explorer.atlas(sae, zoom, q.as_deref(), k))
        }
        ("GET", ["api", "saes", sae, "features", fid]) => {
            let selection = parse_selection(params.get("selection"))?;
            to_value(explorer.feature(sae, parse_feature_id(fid)?, selection.as_deref()))
        }
        ("POST", ["api", "saes", sae, "features", fid, "probe"]) => {
            to_value(explorer.probe(sae, parse_feature_id(fid)?, &parse_body(&body)?))
        }
        ("POST", ["api", "saes", sae, "features", fid, "coactivate"]) => {
            to_value(explorer.coactivate(sae, parse_feature_id(fid)?, &parse_body(&body)?))
        }
        ("POST", ["api", "saes", sae, "features", fid, "steer"]) => {
            to_value(explorer.steer(sae, parse_feature_id(fid)?, &parse_body(&body)?))
        }
        _ => Err(ApiError::new(404, "route_not_found", format!("no endpoint {method} {path}"))),
    }
}

/// Binds `addr`, reporting a bind failure as an error.
pub async fn bind(addr: &str) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, packs = state.explorer.registry.packs.len(), "serving");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
