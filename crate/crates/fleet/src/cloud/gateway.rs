//! HTTP and WebSocket gateway in front of the router.

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use fleet_core::protocol::{
    encode_envelope, AssignmentSpec, CodeDeploymentSpec, Envelope, FieldError,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;
use tracing::{debug, warn};

use super::{CloudHandle, Rejection, CLOUD_SENDER_ID};
use crate::api::{ApiError, DelayProfile, SubmitResponse};
use crate::config::CloudConfig;

const PLACEHOLDER_UI: &str =
    "<!doctype html><title>fleet</title><p>No dashboard bundle configured. \
Set <code>ui_dir</code> in the cloud config to serve one here.</p>";

pub(crate) async fn serve(listener: TcpListener, handle: CloudHandle, config: CloudConfig) {
    if let Err(e) = axum::serve(listener, app(handle, &config)).await {
        warn!("gateway stopped: {e}");
    }
}

pub(crate) fn app(handle: CloudHandle, config: &CloudConfig) -> Router {
    let router = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/assignments", post(submit))
        .route("/assignments/{id}", get(assignment))
        .route("/assignments/{id}/cancel", post(cancel))
        .route("/modules", post(deploy))
        .route("/clients", get(clients))
        .route("/faults", put(set_faults))
        .route("/stream", get(stream));
    let router = match &config.ui_dir {
        Some(dir) => router.nest_service("/ui", ServeDir::new(dir)),
        None => router.route("/ui", get(|| async { Html(PLACEHOLDER_UI) })),
    };
    router.with_state(handle)
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

/// Decodes a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, Rejection> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let message = e.inner().to_string();
        Rejection {
            status: 400,
            body: ApiError {
                error: "validation".into(),
                message: format!("invalid request body: {message}"),
                fields: vec![FieldError::new(field, message)],
                diagnostics: vec![],
            },
        }
    })
}

async fn submit(
    State(cloud): State<CloudHandle>,
    body: Bytes,
) -> Result<Json<SubmitResponse>, Rejection> {
    let spec: AssignmentSpec = parse_body(&body)?;
    let assignment_id = cloud.submit(spec).await?;
    Ok(Json(SubmitResponse { assignment_id }))
}

async fn deploy(
    State(cloud): State<CloudHandle>,
    body: Bytes,
) -> Result<impl IntoResponse, Rejection> {
    let spec: CodeDeploymentSpec = parse_body(&body)?;
    Ok(Json(cloud.deploy(spec).await?))
}

async fn assignment(
    State(cloud): State<CloudHandle>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, Rejection> {
    Ok(Json(cloud.assignment(&id).await?))
}

async fn cancel(
    State(cloud): State<CloudHandle>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, Rejection> {
    Ok((StatusCode::ACCEPTED, Json(cloud.cancel(&id).await?)))
}

async fn clients(State(cloud): State<CloudHandle>) -> impl IntoResponse {
    Json(cloud.clients().await)
}

async fn set_faults(
    State(cloud): State<CloudHandle>,
    body: Bytes,
) -> Result<impl IntoResponse, Rejection> {
    let profile: DelayProfile = parse_body(&body)?;
    Ok(Json(cloud.set_delays(profile).await?))
}

#[derive(Deserialize)]
struct StreamQuery {
    user_id: Option<String>,
    assignment_id: Option<String>,
}

async fn stream(
    State(cloud): State<CloudHandle>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, Rejection> {
    let Some(user_id) = q.user_id.filter(|u| !u.is_empty()) else {
        return Err(Rejection::validation("user_id query parameter is required"));
    };
    let rx = cloud.subscribe(&user_id, q.assignment_id.as_deref());
    Ok(ws.on_upgrade(move |socket| pump(socket, rx)))
}

async fn pump(
    mut socket: WebSocket,
    mut rx: tokio::sync::mpsc::UnboundedReceiver<super::StreamItem>,
) {
    let mut seq = 0u64;
    loop {
        tokio::select! {
            item = rx.recv() => {
                let Some(payload) = item else { break };
                seq += 1;
                let line = match encode_envelope(&Envelope::new(CLOUD_SENDER_ID, seq, payload)) {
                    Ok(l) => l,
                    Err(e) => {
                        warn!("stream item not encodable: {e}");
                        continue;
                    }
                };
                let text = String::from_utf8_lossy(&line).trim_end().to_owned();
                if socket.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    debug!("stream closed");
}
