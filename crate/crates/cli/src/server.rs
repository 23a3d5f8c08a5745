//! Local HTTP service for interactive refinement.
//!
//! | route | |
//! |---|---|
//! | `GET /abstraction` | current abstraction JSON |
//! | `GET /mesh/{id}` | tessellation of one primitive |
//! | `GET /reference-mesh` | zero isosurface of the grid |
//! | `POST /refine` | `{"id", "splits"}`, returns the new abstraction |
//! | `POST /undo` | returns the restored abstraction |
//! | `GET /metrics` | metric report against the grid |
//!
//! Mutations are serialized: a second one while another is running gets `409`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lightsq::mesh::{extract_isosurface, IndexedMeshJson};
use lightsq::metrics::{evaluate_abstraction, EvalOptions};
use lightsq::pipeline::{multiscale_refine, PipelineError, RefineRequest};
use lightsq::Abstraction;
use serde::Deserialize;

use crate::session::SessionState;

/// Tessellation density of `GET /mesh/{id}`.
pub const MESH_SUBDIVISIONS: usize = 32;

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

struct Shared {
    session: RwLock<SessionState>,
    busy: AtomicBool,
    reference_mesh: OnceLock<Arc<String>>,
    eval: EvalOptions,
}

/// Held for the duration of one mutation.
pub struct MutationGuard {
    shared: Arc<Shared>,
}

impl Drop for MutationGuard {
    fn drop(&mut self) {
        self.shared.busy.store(false, Ordering::Release);
    }
}

impl AppState {
    pub fn new(session: SessionState, eval: EvalOptions) -> Self {
        Self {
            shared: Arc::new(Shared {
                session: RwLock::new(session),
                busy: AtomicBool::new(false),
                reference_mesh: OnceLock::new(),
                eval,
            }),
        }
    }

    /// `None` while another mutation is running.
    pub fn try_begin_mutation(&self) -> Option<MutationGuard> {
        self.shared
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| MutationGuard {
                shared: self.shared.clone(),
            })
    }

    pub fn snapshot(&self) -> Abstraction {
        self.read().current().clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SessionState> {
        self.shared.session.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SessionState> {
        self.shared.session.write().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/abstraction", get(get_abstraction))
        .route("/mesh/{id}", get(get_mesh))
        .route("/reference-mesh", get(get_reference_mesh))
        .route("/refine", post(post_refine))
        .route("/undo", post(post_undo))
        .route("/metrics", get(get_metrics))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn json_text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn get_abstraction(State(app): State<AppState>) -> Response {
    json_text(app.read().current().to_json())
}

async fn get_mesh(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    let Ok(id) = id.parse::<u32>() else {
        return error(StatusCode::BAD_REQUEST, format!("bad primitive id {id:?}"));
    };
    let Some(p) = app.read().current().get(id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("no primitive with id {id}"));
    };
    Json(IndexedMeshJson::from(&p.sq.tessellate(MESH_SUBDIVISIONS))).into_response()
}

async fn get_reference_mesh(State(app): State<AppState>) -> Response {
    if let Some(body) = app.shared.reference_mesh.get() {
        return json_text(body.as_ref().clone());
    }
    let grid = app.read().grid.clone();
    let body = match blocking(move || {
        let mesh = extract_isosurface(&grid.values, grid.resolution, &grid.origin, grid.voxel_size);
        serde_json::to_string(&IndexedMeshJson::from(&mesh)).expect("mesh serializes")
    })
    .await
    {
        Ok(b) => b,
        Err(r) => return r,
    };
    json_text(app.shared.reference_mesh.get_or_init(|| Arc::new(body)).as_ref().clone())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineBody {
    id: u32,
    splits: usize,
}

async fn post_refine(State(app): State<AppState>, body: Bytes) -> Response {
    let body: RefineBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    if body.splits == 0 {
        return error(StatusCode::BAD_REQUEST, PipelineError::InvalidSplits.to_string());
    }
    let Some(guard) = app.try_begin_mutation() else {
        return error(StatusCode::CONFLICT, "a refinement is already in flight");
    };
    let (current, grid, config) = {
        let s = app.read();
        (s.current().clone(), s.grid.clone(), s.config.clone())
    };
    if current.get(body.id).is_none() {
        return error(StatusCode::NOT_FOUND, PipelineError::UnknownPrimitive(body.id).to_string());
    }
    let request = RefineRequest::new(body.id, body.splits, &config);
    let result = match blocking(move || multiscale_refine(&current, &grid, &request, &config)).await {
        Ok(r) => r,
        Err(r) => return r,
    };
    let response = match result {
        Ok(next) => {
            let text = next.to_json();
            app.write().push(next);
            json_text(text)
        }
        Err(e @ PipelineError::UnknownPrimitive(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ PipelineError::InvalidSplits) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e @ PipelineError::DegenerateRegion(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    drop(guard);
    response
}

async fn post_undo(State(app): State<AppState>) -> Response {
    let Some(_guard) = app.try_begin_mutation() else {
        return error(StatusCode::CONFLICT, "a refinement is already in flight");
    };
    let mut s = app.write();
    match s.undo() {
        Some(a) => json_text(a.to_json()),
        None => error(StatusCode::CONFLICT, "nothing to undo"),
    }
}

async fn get_metrics(State(app): State<AppState>) -> Response {
    let (current, grid) = {
        let s = app.read();
        (s.current().clone(), s.grid.clone())
    };
    let opts = app.shared.eval;
    match blocking(move || evaluate_abstraction(&grid, &current, &opts)).await {
        Ok(report) => Json(report).into_response(),
        Err(r) => r,
    }
}
