//! HTTP/JSON service for live acquisition sessions: load a checkpoint, open
//! sessions against it, ask which feature to acquire next, submit values and
//! read the target's predictive summary. See `API.md` for the wire format.

mod error;
mod session;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use moarm::acquisition::AcquisitionOptions;
use moarm::model::ModelBundle;
use moarm::rng::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use error::ApiError;
pub use session::{feature_table, FeatureInfo, HistoryEntry, ObservationRequest, Session, Suggestion};

const SESSION_SEED: u64 = 0x7365_7373;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub acquisition: AcquisitionOptions,
    /// Root of the per-session seeds.
    pub seed: u64,
    /// Sessions untouched for this long are dropped.
    pub idle_ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionOptions::default(),
            seed: 0,
            idle_ttl: Duration::from_secs(3600),
        }
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    pub config: ServiceConfig,
    models: RwLock<BTreeMap<String, Arc<ModelBundle>>>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    next_model: AtomicU64,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            models: RwLock::new(BTreeMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_model: AtomicU64::new(1),
            next_session: AtomicU64::new(1),
        })
    }

    /// Registers a loaded model and returns its id.
    pub fn add_model(&self, bundle: ModelBundle) -> String {
        let id = format!("m{}", self.next_model.fetch_add(1, Ordering::Relaxed));
        self.models.write().unwrap().insert(id.clone(), Arc::new(bundle));
        id
    }

    fn model(&self, id: &str) -> Result<Arc<ModelBundle>, ApiError> {
        self.models.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::unknown_model(id))
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the configured TTL. Sessions with
    /// a request in flight are kept.
    pub fn expire_idle(&self, now: Instant) -> usize {
        let ttl = self.config.idle_ttl;
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, h| match h.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_used) < ttl,
            Err(_) => true,
        });
        before - sessions.len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", post(load_model))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/suggestions", get(suggestions))
        .route("/sessions/{id}/observations", post(observe))
        .route("/sessions/{id}/prediction", get(prediction))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

/// Periodically expires idle sessions until the runtime shuts down.
pub fn spawn_reaper(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let period = (state.config.idle_ttl / 4).clamp(Duration::from_millis(10), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = state.expire_idle(Instant::now());
            if n > 0 {
                tracing::info!(expired = n, "dropped idle sessions");
            }
        }
    })
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs `f` on the session on a blocking thread while holding its lock, so
/// requests to one session are serialized and other sessions stay free.
async fn with_session<R, F>(state: &AppState, id: &str, f: F) -> Result<R, ApiError>
where
    R: Send + 'static,
    F: FnOnce(&mut Session) -> Result<R, ApiError> + Send + 'static,
{
    let handle = state.session(id)?;
    let mut guard = handle.lock_owned().await;
    tokio::task::spawn_blocking(move || {
        guard.last_used = Instant::now();
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadModelRequest {
    path: PathBuf,
}

async fn load_model(State(state): State<Arc<AppState>>, body: Result<Json<LoadModelRequest>, JsonRejection>) -> Result<impl IntoResponse, ApiError> {
    let req = json_body(body)?;
    let path = req.path.clone();
    let bundle = tokio::task::spawn_blocking(move || ModelBundle::load(&path, None))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_checkpoint", e.to_string()))?;
    let features = feature_table(&bundle);
    let schema_hash = bundle.schema_hash.clone();
    let mode = bundle.model.config.mode;
    let id = state.add_model(bundle);
    tracing::info!(model = %id, path = %req.path.display(), "loaded checkpoint");
    Ok((
        StatusCode::CREATED,
        Json(json!({ "model_id": id, "schema_hash": schema_hash, "mode": mode, "features": features })),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSessionRequest {
    model_id: String,
}

#[derive(Serialize)]
struct SessionCreated<'a> {
    session_id: &'a str,
    model_id: &'a str,
    seed: u64,
    features: Vec<FeatureInfo>,
    observed_count: usize,
    prediction: &'a moarm::acquisition::TargetPrediction,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let req = json_body(body)?;
    let bundle = state.model(&req.model_id)?;
    let n = state.next_session.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n}");
    let seed = Stream::new(state.config.seed).fork(&[SESSION_SEED, n]).key();
    let opts = state.config.acquisition;
    let (sid, mid) = (id.clone(), req.model_id.clone());
    let session = tokio::task::spawn_blocking(move || Session::new(sid, mid, bundle, opts, seed))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let body = serde_json::to_value(SessionCreated {
        session_id: &id,
        model_id: &req.model_id,
        seed,
        features: feature_table(session.bundle()),
        observed_count: 0,
        prediction: session.prediction(),
    })
    .map_err(|e| ApiError::internal(e.to_string()))?;
    state.sessions.lock().unwrap().insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::unknown_session(&id)),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuggestionQuery {
    top_n: Option<usize>,
}

async fn suggestions(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<SuggestionQuery>, QueryRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if q.top_n == Some(0) {
        return Err(ApiError::bad_request("top_n must be at least 1"));
    }
    let opts = state.config.acquisition;
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        let list = s.suggestions(q.top_n)?;
        Ok(Json(json!({
            "session_id": sid,
            "observed_count": s.n_observed(),
            "samples": opts.samples,
            "bins": opts.binning.bins,
            "suggestions": list,
        })))
    })
    .await
}

async fn observe(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ObservationRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let req = json_body(body)?;
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        let prediction = s.observe(&req)?.clone();
        let last = s.history().last().cloned();
        Ok(Json(json!({
            "session_id": sid,
            "observed_count": s.n_observed(),
            "observation": last,
            "prediction": prediction,
        })))
    })
    .await
}

async fn prediction(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        Ok(Json(json!({
            "session_id": sid,
            "model_id": s.model_id,
            "observed_count": s.n_observed(),
            "prediction": s.prediction(),
            "history": s.history(),
        })))
    })
    .await
}

/// Serves `router(state)` on `listener` with the idle-session reaper running.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let reaper = spawn_reaper(Arc::clone(&state));
    let result = axum::serve(listener, router(state)).await;
    reaper.abort();
    result
}
