//! JSON-over-HTTP session service: each session runs one acquisition
//! episode, with the client answering the engine's requests one at a time.
//!
//! | route | |
//! |-------|---|
//! | `POST /sessions` | create (`{"mode": ..., "engine": token}`) |
//! | `GET /sessions/{id}` | full snapshot |
//! | `POST /sessions/{id}/answer` | submit an input |
//! | `GET /sessions/{id}/next` | pending request, top-k, values |
//! | `DELETE /sessions/{id}` | drop a session |
//! | `GET /schema` | metadata schema, class count, simulated case ids |
//! | `GET /healthz` | liveness |
//!
//! Anything else is served from the static directory, if one is configured.

mod error;
mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use mint_core::engine::{EngineConfig, ImageValueModel};
use mint_core::{Case, Classifier, MetadataSchema, TrainedModel};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use session::{
    HeldAnswer, HeldImage, Mode, NextView, Pending, RankedClass, Session, Snapshot, Status,
    Submission,
};

/// Read-only state shared by every session.
pub struct Resources {
    pub model: TrainedModel,
    pub schema: MetadataSchema,
    pub ivm: Option<ImageValueModel>,
    /// Cases available to simulated sessions.
    pub cases: BTreeMap<u64, Case>,
    pub default_engine: EngineConfig,
    pub top_k: usize,
    /// Most images a live session may hold.
    pub live_image_cap: usize,
}

impl Resources {
    pub fn new(
        model: TrainedModel,
        schema: MetadataSchema,
        ivm: Option<ImageValueModel>,
        cases: Vec<Case>,
    ) -> mint_core::Result<Self> {
        model.check_schema(&schema)?;
        Ok(Resources {
            model,
            schema,
            ivm,
            cases: cases.into_iter().map(|c| (c.case_id, c)).collect(),
            default_engine: EngineConfig::default(),
            top_k: 3,
            live_image_cap: 6,
        })
    }

    pub fn case(&self, case_id: u64) -> Result<&Case, ApiError> {
        self.cases
            .get(&case_id)
            .ok_or_else(|| ApiError::not_found(format!("no case {case_id}")))
    }
}

struct Entry {
    session: Arc<tokio::sync::Mutex<Session>>,
    touched: Mutex<Instant>,
}

/// Sessions by id. Each session has its own lock, so requests for one
/// session are serialized while different sessions proceed in parallel.
pub struct Registry {
    sessions: Mutex<HashMap<String, Arc<Entry>>>,
    ttl: Duration,
}

impl Registry {
    pub fn new(ttl: Duration) -> Self {
        Registry {
            sessions: Mutex::new(HashMap::new()),
            ttl,
        }
    }

    fn insert(&self, session: Session) {
        let id = session.id.clone();
        let entry = Entry {
            session: Arc::new(tokio::sync::Mutex::new(session)),
            touched: Mutex::new(Instant::now()),
        };
        self.sessions.lock().unwrap().insert(id, Arc::new(entry));
    }

    fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        let entry = map
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        let mut touched = entry.touched.lock().unwrap();
        if touched.elapsed() > self.ttl {
            drop(touched);
            map.remove(id);
            return Err(ApiError::not_found(format!("session {id} expired")));
        }
        *touched = Instant::now();
        Ok(entry.session.clone())
    }

    fn remove(&self, id: &str) -> bool {
        self.sessions.lock().unwrap().remove(id).is_some()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn sweep(&self) -> usize {
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| e.touched.lock().unwrap().elapsed() <= self.ttl);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct AppState {
    pub resources: Arc<Resources>,
    pub registry: Arc<Registry>,
}

impl AppState {
    pub fn new(resources: Resources, ttl: Duration) -> Self {
        Self::shared(Arc::new(resources), ttl)
    }

    pub fn shared(resources: Arc<Resources>, ttl: Duration) -> Self {
        AppState {
            resources,
            registry: Arc::new(Registry::new(ttl)),
        }
    }
}

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Deserialize)]
struct CreateRequest {
    mode: Mode,
    #[serde(default)]
    engine: Option<String>,
}

#[derive(Serialize)]
struct SchemaView<'a> {
    schema: &'a MetadataSchema,
    num_classes: usize,
    case_ids: Vec<u64>,
}

const ENGINE_TOKEN_HELP: &str = "expected `<metric>[:option]*` with metric one of kl|js|entropy \
     and options t_meta=<x>, t_image=<x>, instruct, max_steps=<n>, kl_reverse";

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let res = app.resources.clone();
    let config = match &req.engine {
        None => res.default_engine.clone(),
        Some(token) => EngineConfig::from_token(token).map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_engine",
                format!("{e}; {ENGINE_TOKEN_HELP}"),
            )
        })?,
    };
    if let Mode::Simulated { case_id } = req.mode {
        res.case(case_id)?;
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let (session, snapshot) = tokio::task::spawn_blocking(move || {
        let s = Session::create(id, req.mode, config, &res)?;
        let snap = s.snapshot(&res);
        Ok::<_, ApiError>((s, snap))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    tracing::info!(session = %snapshot.session_id, mode = ?snapshot.mode, "session created");
    app.registry.insert(session);
    Ok((StatusCode::CREATED, Json(snapshot)))
}

async fn get_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Snapshot>, ApiError> {
    let session = app.registry.get(&id)?;
    let s = session.lock().await;
    Ok(Json(s.snapshot(&app.resources)))
}

async fn next_request(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<NextView>, ApiError> {
    let session = app.registry.get(&id)?;
    let s = session.lock().await;
    Ok(Json(s.next_view(app.resources.top_k)))
}

async fn submit_answer(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Submission>, JsonRejection>,
) -> Result<Json<Snapshot>, ApiError> {
    let Json(input) = body?;
    let mut guard = app.registry.get(&id)?.lock_owned().await;
    let res = app.resources.clone();
    let snapshot = tokio::task::spawn_blocking(move || {
        guard.submit(input, &res)?;
        Ok::<_, ApiError>(guard.snapshot(&res))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(snapshot))
}

async fn delete_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    if app.registry.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("no session {id}")))
    }
}

async fn schema(State(app): State<AppState>) -> impl IntoResponse {
    let res = &app.resources;
    Json(SchemaView {
        schema: &res.schema,
        num_classes: res.model.num_classes(),
        case_ids: res.cases.keys().copied().collect(),
    })
    .into_response()
}

async fn healthz(State(app): State<AppState>) -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok", "sessions": app.registry.len() }))
}

/// Builds the router; `static_dir` is served for every other path.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/answer", post(submit_answer))
        .route("/sessions/{id}/next", get(next_request))
        .route("/schema", get(schema))
        .route("/healthz", get(healthz))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped, sweeping idle sessions periodically.
pub async fn serve(
    addr: SocketAddr,
    state: AppState,
    static_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let registry = state.registry.clone();
    let every = (registry.ttl / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = registry.sweep();
            if n > 0 {
                tracing::info!(expired = n, "idle sessions dropped");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state, static_dir)).await
}
