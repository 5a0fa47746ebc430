//! HTTP facade over the engine.
//!
//! | method | path                | body / result                                  |
//! |--------|---------------------|------------------------------------------------|
//! | POST   | `/v1/complete`      | `{id?, text, domain?, choices?}` -> completion |
//! | GET    | `/v1/stats`         | engine counters                                |
//! | POST   | `/v1/drain`         | waits for pending shadow work                  |
//! | GET    | `/v1/memory/export` | memory in its JSON-lines persistence format    |

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rar_core::engine::{Engine, EngineError, EngineStats};
use rar_core::model::{CaseKind, IdGenerator, ModelTier, RequestRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

/// Counters served by `/v1/stats`.
pub type GatewayStats = EngineStats;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequest {
    pub id: Option<String>,
    pub text: String,
    pub domain: Option<String>,
    pub choices: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
    pub tier: ModelTier,
    /// `null` when the request went to shadow inference, which finishes
    /// after the response is sent.
    pub case: Option<CaseKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide_id: Option<String>,
}

struct AppState {
    engine: Engine,
    drain_timeout: Duration,
    ids: IdGenerator,
}

pub fn router(engine: Engine, drain_timeout: Duration) -> Router {
    let state = Arc::new(AppState {
        engine,
        drain_timeout,
        ids: IdGenerator::new("req"),
    });
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/stats", get(stats))
        .route("/v1/drain", post(drain))
        .route("/v1/memory/export", get(export_memory))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    engine: Engine,
    drain_timeout: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine, drain_timeout))
        .with_graceful_shutdown(shutdown)
        .await
}

fn error(status: StatusCode, message: impl Into<String>, failed_tier: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(tier) = failed_tier {
        body["failed_tier"] = json!(tier);
    }
    (status, Json(body)).into_response()
}

fn engine_error(e: EngineError) -> Response {
    let message = e.to_string();
    match (&e, e.failed_component()) {
        (EngineError::Request(_), _) => error(StatusCode::BAD_REQUEST, message, None),
        (_, Some(component)) => error(StatusCode::BAD_GATEWAY, message, Some(component)),
        _ => {
            tracing::error!(error = %message, "request failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, message, None)
        }
    }
}

async fn complete(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: CompleteRequest = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}"), None),
    };
    let mut request = RequestRecord::new(body.id.unwrap_or_else(|| state.ids.next_id()), body.text);
    request.domain = body.domain;
    request.choices = body.choices;
    match state.engine.handle(request).await {
        Ok(resp) => Json(CompleteResponse {
            text: resp.text,
            tier: resp.tier,
            case: resp.case,
            guide_id: resp.guide_id,
        })
        .into_response(),
        Err(e) => engine_error(e),
    }
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<GatewayStats> {
    Json(state.engine.stats())
}

async fn drain(State(state): State<Arc<AppState>>) -> Response {
    match tokio::time::timeout(state.drain_timeout, state.engine.quiesce()).await {
        Ok(()) => Json(json!({ "drained": true })).into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({
                "drained": false,
                "pending": state.engine.pending_shadows(),
                "error": format!("shadow queue not empty after {:?}", state.drain_timeout),
            })),
        )
            .into_response(),
    }
}

async fn export_memory(State(state): State<Arc<AppState>>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        state.engine.export_memory(),
    )
        .into_response()
}
