//! HTTP API behind the interactive grading tool.
//!
//! | Method | Path                       | Body / query            | Response                  |
//! |--------|----------------------------|-------------------------|---------------------------|
//! | POST   | `/sessions`                | source image bytes      | session JSON              |
//! | GET    | `/sessions/{id}/map`       | `z=v1,v2[,v3,v4]`       | PNG (JPEG with `preview`) |
//! | POST   | `/sessions/{id}/extract`   | target image bytes      | style record JSON         |
//! | GET    | `/models/{id}/styles`      |                         | style map JSON            |
//! | GET    | `/healthz`                 |                         | status JSON               |
//!
//! Uploads are raw PNG or JPEG bodies. The source conditioning is computed
//! once per session; rendering only runs the flow.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stylemap::flow::{Conditioning, FlowModel};
use stylemap::imaging::{decode_image, encode_jpeg, encode_png, BitDepth, ImageBuffer};
use stylemap::style::{apply_with_conditioning, extract_with_conditioning, StyleMap, StyleMapEntry};
use stylemap::{ModelContainer, StyleVector};
use uuid::Uuid;

/// Default upload limit in bytes.
pub const DEFAULT_UPLOAD_LIMIT: usize = 64 << 20;
const PREVIEW_QUALITY: u8 = 85;

/// One uploaded source frame and its cached conditioning.
pub struct Session {
    pub width: usize,
    pub height: usize,
    pub conditioning: Conditioning<f32>,
    /// Last target uploaded for extraction.
    pub reference: RwLock<Option<ImageBuffer>>,
}

struct Shared {
    model: FlowModel<f32>,
    model_id: String,
    styles: Vec<StyleMapEntry>,
    sessions: RwLock<HashMap<Uuid, Arc<Session>>>,
}

/// Server state: one read-only model and the open sessions.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(model: FlowModel<f32>, model_id: String, styles: Vec<StyleMapEntry>) -> Self {
        Self(Arc::new(Shared {
            model,
            model_id,
            styles,
            sessions: RwLock::new(HashMap::new()),
        }))
    }

    pub fn model_id(&self) -> &str {
        &self.0.model_id
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.read().expect("session lock").len()
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let unknown = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"));
        let key = Uuid::parse_str(id).map_err(|_| unknown())?;
        self.0.sessions.read().expect("session lock").get(&key).cloned().ok_or_else(unknown)
    }
}

/// Training-set styles stored in a model file by `train`.
pub fn stored_styles(container: &ModelContainer) -> Vec<StyleMapEntry> {
    container
        .training
        .get("styles")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub model_id: String,
    pub dims: usize,
}

#[derive(Debug, Deserialize)]
pub struct MapQuery {
    pub z: String,
    /// Any value other than absent/`0`/`false` returns a JPEG preview.
    #[serde(default)]
    pub preview: Option<String>,
}

pub fn router(state: AppState, upload_limit: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/map", get(map_style))
        .route("/sessions/{id}/extract", post(extract))
        .route("/models/{id}/styles", get(styles))
        .layer(DefaultBodyLimit::max(upload_limit))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_id": state.0.model_id,
        "dims": state.0.model.latent_dim(),
        "sessions": state.session_count(),
    }))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn decode_upload(body: &[u8]) -> Result<ImageBuffer, ApiError> {
    if body.is_empty() {
        return Err(ApiError::bad_request("empty upload"));
    }
    decode_image(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let st = state.clone();
    let session = blocking(move || {
        let image = decode_upload(&body)?;
        let conditioning = Conditioning::from_image(&image, st.0.model.degree()).map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(Session {
            width: image.width(),
            height: image.height(),
            conditioning,
            reference: RwLock::new(None),
        })
    })
    .await?;
    let id = Uuid::new_v4();
    let info = SessionInfo {
        session_id: id.to_string(),
        width: session.width,
        height: session.height,
        model_id: state.0.model_id.clone(),
        dims: state.0.model.latent_dim(),
    };
    state.0.sessions.write().expect("session lock").insert(id, Arc::new(session));
    Ok((StatusCode::CREATED, Json(info)))
}

/// Parses `v1,v2,...` into a style of the model's dimension.
pub fn parse_z(text: &str, dims: usize) -> Result<StyleVector, String> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != dims {
        return Err(format!("z has {} values but the model has {dims} style dimensions", values.len()));
    }
    StyleVector::manual(values).map_err(|e| e.to_string())
}

fn wants_preview(flag: Option<&str>) -> bool {
    flag.is_some_and(|v| !matches!(v, "" | "0" | "false"))
}

async fn map_style(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<MapQuery>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let style = parse_z(&q.z, state.0.model.latent_dim()).map_err(ApiError::bad_request)?;
    let preview = wants_preview(q.preview.as_deref());
    let (bytes, mime) = blocking(move || {
        let image = apply_with_conditioning(&state.0.model, &session.conditioning, session.width, session.height, &style)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let encoded = if preview {
            encode_jpeg(&image, PREVIEW_QUALITY).map(|b| (b, "image/jpeg"))
        } else {
            encode_png(&image, BitDepth::Eight).map(|b| (b, "image/png"))
        };
        encoded.map_err(|e| ApiError::internal(e.to_string()))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn extract(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<stylemap::StyleRecord>, ApiError> {
    let session = state.session(&id)?;
    let record = blocking(move || {
        let target = decode_upload(&body)?;
        if target.dims() != (session.width, session.height) {
            return Err(ApiError::bad_request(format!(
                "target is {:?} but the session source is {:?}",
                target.dims(),
                (session.width, session.height)
            )));
        }
        let style = extract_with_conditioning(&state.0.model, &session.conditioning, &target, &id)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        *session.reference.write().expect("reference lock") = Some(target);
        Ok(style.to_record(&state.0.model_id))
    })
    .await?;
    Ok(Json(record))
}

async fn styles(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<StyleMap>, ApiError> {
    if id != state.0.model_id {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown model {id}")));
    }
    Ok(Json(StyleMap {
        model_id: state.0.model_id.clone(),
        dims: state.0.model.latent_dim(),
        entries: state.0.styles.clone(),
    }))
}
