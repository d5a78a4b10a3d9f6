//! Public HTTP API.
//!
//! | route | |
//! |---|---|
//! | `POST /api/sessions` | new session → `{session_id}` |
//! | `POST /api/sessions/{id}/turns` | multipart `text`/`audio`/`video` → turn response (`?trace=1` adds the trace) |
//! | `GET /api/sessions/{id}` | transcript |
//! | `GET /api/media/{hash}` | stored artifact bytes |
//! | `GET /healthz` | liveness |

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use empathyear_core::backends::{AudioArtifact, VideoArtifact};
use empathyear_core::conversation::{Session, SessionError, TurnRecord};
use empathyear_core::meta_response::{MetaField, MetaResponse, Provenance};
use empathyear_core::pipeline::{MultimodalResponse, Pipeline, PipelineError, TurnInput, TurnTrace};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const MEDIA_ROUTE: &str = "/api/media";

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Pipeline,
    pub bearer_token: Option<Arc<str>>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub step: Option<u8>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            step: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": { "code": self.code, "message": self.message } });
        if let Some(step) = self.step {
            body["error"]["step"] = json!(step);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::SessionNotFound(id) => ApiError::new(
                StatusCode::NOT_FOUND,
                "session_not_found",
                format!("session {id} not found"),
            ),
            other => ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "storage_unavailable",
                other.to_string(),
            ),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::SessionNotFound(id) => ApiError::new(
                StatusCode::NOT_FOUND,
                "session_not_found",
                format!("session {id} not found"),
            ),
            PipelineError::EmptyInput => ApiError::new(StatusCode::BAD_REQUEST, "empty_input", e.to_string()),
            PipelineError::TurnFailed { step, .. } => ApiError {
                step: Some(step),
                ..ApiError::new(StatusCode::BAD_GATEWAY, "turn_failed", e.to_string())
            },
            PipelineError::Storage(inner) => ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "storage_unavailable",
                inner.to_string(),
            ),
        }
    }
}

/// The nine fields flat under their snake-case keys, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaView {
    #[serde(flatten)]
    pub fields: serde_json::Map<String, serde_json::Value>,
    pub catalog_scene: bool,
    pub repaired: bool,
    pub provenance: Provenance,
}

impl MetaView {
    pub fn new(meta: &MetaResponse) -> Self {
        let fields = MetaField::ALL
            .iter()
            .map(|f| (f.key().to_string(), json!(meta.field_value(*f))))
            .collect();
        Self {
            fields,
            catalog_scene: meta.scene.event_scenario.catalog_member,
            repaired: meta.repaired(),
            provenance: meta.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactView {
    pub url: String,
    pub hash: String,
    pub content_type: String,
    pub duration_s: f64,
    pub emotion: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_id: Option<String>,
}

fn media_url(hash: &str) -> String {
    format!("{MEDIA_ROUTE}/{hash}")
}

impl From<&AudioArtifact> for ArtifactView {
    fn from(a: &AudioArtifact) -> Self {
        Self {
            url: media_url(&a.hash),
            hash: a.hash.clone(),
            content_type: a.format.content_type().into(),
            duration_s: a.duration_s,
            emotion: a.emotion.to_string(),
            face_id: None,
        }
    }
}

impl From<&VideoArtifact> for ArtifactView {
    fn from(v: &VideoArtifact) -> Self {
        Self {
            url: media_url(&v.hash),
            hash: v.hash.clone(),
            content_type: v.format.content_type().into(),
            duration_s: v.duration_s,
            emotion: v.emotion.to_string(),
            face_id: Some(v.face_id.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub session_id: String,
    pub turn_index: usize,
    pub response_text: String,
    pub meta: MetaView,
    pub degraded: bool,
    pub audio: Option<ArtifactView>,
    pub video: Option<ArtifactView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<TurnTrace>,
}

impl TurnView {
    pub fn new(r: &MultimodalResponse, with_trace: bool) -> Self {
        Self {
            session_id: r.session_id.clone(),
            turn_index: r.turn_index,
            response_text: r.response_text.clone(),
            meta: MetaView::new(&r.meta),
            degraded: r.degraded,
            audio: r.audio.as_ref().map(ArtifactView::from),
            video: r.video.as_ref().map(ArtifactView::from),
            trace: with_trace.then(|| r.trace.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptView {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<TurnRecord>,
}

impl From<Session> for TranscriptView {
    fn from(s: Session) -> Self {
        Self {
            session_id: s.id,
            created_at: s.created_at,
            turns: s.turns,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct TurnQuery {
    #[serde(default)]
    trace: Option<String>,
}

fn truthy(v: Option<&str>) -> bool {
    matches!(v, Some("1" | "true" | "yes"))
}

async fn create_session(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let session = state.pipeline.sessions.create_session()?;
    tracing::info!(session = %session.id, "session created");
    Ok((StatusCode::CREATED, Json(json!({ "session_id": session.id }))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TranscriptView>, ApiError> {
    Ok(Json(state.pipeline.sessions.get(&id)?.into()))
}

async fn read_turn_input(mut multipart: Multipart) -> Result<TurnInput, ApiError> {
    let mut input = TurnInput::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let slot_taken = match name.as_str() {
            "text" => input.text.is_some(),
            "audio" => input.audio.is_some(),
            "video" => input.video.is_some(),
            other => return Err(ApiError::bad_request(format!("unexpected part {other:?}"))),
        };
        if slot_taken {
            return Err(ApiError::bad_request(format!("part {name:?} given twice")));
        }
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("reading part {name:?}: {e}")))?;
        match name.as_str() {
            "text" => {
                let text =
                    String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request("text part is not UTF-8"))?;
                input.text = Some(text);
            }
            "audio" => input.audio = Some(bytes.to_vec()),
            _ => input.video = Some(bytes.to_vec()),
        }
    }
    Ok(input)
}

async fn post_turn(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<TurnQuery>,
    multipart: Multipart,
) -> Result<Json<TurnView>, ApiError> {
    if !state.pipeline.sessions.exists(&id) {
        return Err(SessionError::SessionNotFound(id).into());
    }
    let input = read_turn_input(multipart).await?;
    let response = state.pipeline.run_turn(&id, input).await.map_err(|e| {
        tracing::warn!(session = %id, error = %e, "turn failed");
        ApiError::from(e)
    })?;
    tracing::info!(session = %id, turn = response.turn_index, degraded = response.degraded, "turn done");
    Ok(Json(TurnView::new(&response, truthy(query.trace.as_deref()))))
}

async fn get_media(State(state): State<AppState>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let found = state
        .pipeline
        .media
        .get(&hash)
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable", e.to_string()))?;
    let Some((bytes, format)) = found else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "media_not_found",
            format!("no media {hash}"),
        ));
    };
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(format.content_type())),
            (
                header::CACHE_CONTROL,
                HeaderValue::from_static("public, max-age=31536000, immutable"),
            ),
        ],
        Body::from(bytes),
    )
        .into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

async fn index_page() -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        "empathyear API: POST /api/sessions, POST /api/sessions/{id}/turns, GET /api/sessions/{id}, GET /api/media/{hash}\n",
    )
}

/// Bearer check; media URLs may carry the token as `?access_token=` so media
/// elements can load them.
async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Result<Response, ApiError> {
    let Some(expected) = state.bearer_token.as_deref() else {
        return Ok(next.run(request).await);
    };
    let from_header = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let from_query = request.uri().query().and_then(|q| {
        url::form_urlencoded::parse(q.as_bytes())
            .find(|(k, _)| k == "access_token")
            .map(|(_, v)| v.into_owned())
    });
    let ok = from_header == Some(expected)
        || (request.uri().path().starts_with(MEDIA_ROUTE) && from_query.as_deref() == Some(expected));
    if ok {
        Ok(next.run(request).await)
    } else {
        let mut response = ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token",
        )
        .into_response();
        response
            .headers_mut()
            .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        Ok(response)
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>, max_upload_bytes: usize) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/turns", post(post_turn))
        .route("/api/media/{hash}", get(get_media))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let app = Router::new().merge(api).route("/healthz", get(healthz));
    let app = match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app.route("/", get(index_page)),
    };
    app.layer(DefaultBodyLimit::max(max_upload_bytes)).with_state(state)
}
