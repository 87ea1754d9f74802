//! HTTP service for interactive scene editing.
//!
//! Projects are ingested from mask/depth bundles (or a ready scene
//! sequence), edited through trajectory edits that are kept as an ordered
//! log, and exported as conditioning bundles. All request and response
//! bodies are JSON except rendered previews.

pub mod error;
pub mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use orscene::conditioning::{ConditioningBundle, Trajectory};
use orscene::metrics::compare_bundle;
use orscene::nearmiss::NearMissRule;
use orscene::render::RenderMode;
use orscene::scene::default_palette;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

pub use error::ApiError;
pub use store::{Project, ProjectHandle, ProjectSource, ProjectStore};

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    store: Arc<ProjectStore>,
}

pub fn router(store: Arc<ProjectStore>) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/frames/{t}", get(get_frame))
        .route("/projects/{id}/frames/{t}/render.png", get(get_render))
        .route("/projects/{id}/edits", post(post_edit))
        .route("/projects/{id}/edits/{rev}", delete(delete_edits))
        .route("/projects/{id}/export", post(export))
        .route("/projects/{id}/exports/{eid}/manifest.json", get(get_manifest))
        .route("/projects/{id}/nearmiss", post(nearmiss))
        .route("/compare", post(compare))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(AppState { store })
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(store: Arc<ProjectStore>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn read(h: &ProjectHandle) -> RwLockReadGuard<'_, Project> {
    h.read().unwrap_or_else(|p| p.into_inner())
}

fn write(h: &ProjectHandle) -> RwLockWriteGuard<'_, Project> {
    h.write().unwrap_or_else(|p| p.into_inner())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::bad_request(format!("malformed request body: {e}"))
            .with_detail(json!({ "line": e.line(), "column": e.column() }))
    })
}

fn parse_body_or_default<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse_body(body)
    }
}

fn parse_index(what: &str, raw: &str) -> ApiResult<u64> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("{what} `{raw}` is not a valid index")))
}

async fn create_project(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let source: ProjectSource = parse_body(&body)?;
    let view = blocking(move || {
        let (_, handle) = st.store.create(source)?;
        let view = read(&handle).view()?;
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_project(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let view = blocking(move || Ok(read(&st.store.get(&id)?).view()?)).await?;
    Ok(Json(view).into_response())
}

async fn get_frame(State(st): State<AppState>, Path((id, t)): Path<(String, String)>) -> ApiResult<Response> {
    let t = parse_index("frame", &t)? as usize;
    let body = blocking(move || {
        let handle = st.store.get(&id)?;
        let p = read(&handle);
        let frame = p.frame(t)?;
        Ok(json!({ "frame_index": t, "revision": p.meta().revision, "frame": frame }))
    })
    .await?;
    Ok(Json(body).into_response())
}

async fn get_render(
    State(st): State<AppState>,
    Path((id, t)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let t = parse_index("frame", &t)? as usize;
    let mode = match q.get("mode") {
        Some(m) => m.parse::<RenderMode>()?,
        None => RenderMode::default(),
    };
    let png = blocking(move || Ok(read(&st.store.get(&id)?).render_preview(t, mode)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct WrappedEdit {
    trajectory: Trajectory,
    #[serde(default)]
    author: Option<String>,
}

async fn post_edit(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let raw: Value = parse_body(&body)?;
    let edit = if raw.get("trajectory").is_some() {
        serde_json::from_value::<WrappedEdit>(raw)
    } else {
        serde_json::from_value::<Trajectory>(raw).map(|trajectory| WrappedEdit { trajectory, author: None })
    }
    .map_err(|e| ApiError::bad_request(format!("malformed trajectory: {e}")))?;
    let info = blocking(move || {
        let handle = st.store.get(&id)?;
        let info = write(&handle).post_edit(edit.trajectory, edit.author)?;
        Ok(info)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn delete_edits(State(st): State<AppState>, Path((id, rev)): Path<(String, String)>) -> ApiResult<Response> {
    let rev = parse_index("revision", &rev)?;
    let info = blocking(move || {
        let handle = st.store.get(&id)?;
        let info = write(&handle).truncate(rev)?;
        Ok(info)
    })
    .await?;
    Ok(Json(info).into_response())
}

async fn export(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: store::ExportRequest = parse_body_or_default(&body)?;
    let info = blocking(move || {
        let handle = st.store.get(&id)?;
        // exclusive, so concurrent identical exports cannot race on one directory
        let info = write(&handle).export(&req)?;
        Ok(info)
    })
    .await?;
    let status = if info.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(info)).into_response())
}

async fn get_manifest(
    State(st): State<AppState>,
    Path((id, eid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let path = read(&st.store.get(&id)?).export_manifest_path(&eid)?;
        std::fs::read(&path).map_err(|e| ApiError::from(orscene::Error::io(path, e)))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn nearmiss(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let rule: NearMissRule = parse_body_or_default(&body)?;
    let result = blocking(move || Ok(read(&st.store.get(&id)?).nearmiss(rule)?)).await?;
    Ok(Json(result).into_response())
}

#[derive(Deserialize)]
struct CompareRequest {
    bundle: PathBuf,
    generated: PathBuf,
    #[serde(default)]
    reference: Option<PathBuf>,
}

async fn compare(body: Bytes) -> ApiResult<Response> {
    let req: CompareRequest = parse_body(&body)?;
    let report = blocking(move || {
        let bundle = ConditioningBundle::open(&req.bundle)?;
        Ok(compare_bundle(&bundle, &req.generated, req.reference.as_deref(), &default_palette())?)
    })
    .await?;
    Ok(Json(report).into_response())
}
