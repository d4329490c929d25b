//! HTTP API and server-sent event stream.

use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dada_core::control::{BusMessage, ControlAction, Modality};
use dada_core::MacAddr;
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, watch};

use crate::gateway::{Gateway, GatewayError, Sequenced};

pub type SharedGateway = Arc<Mutex<Gateway>>;

#[derive(Clone)]
pub struct AppState {
    pub gateway: SharedGateway,
    /// Flips to `true` on shutdown so open event streams end.
    pub shutdown: watch::Receiver<bool>,
}

pub fn lock(g: &SharedGateway) -> MutexGuard<'_, Gateway> {
    g.lock().unwrap_or_else(PoisonError::into_inner)
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
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::UnknownDevice(_) => StatusCode::NOT_FOUND,
            GatewayError::Control(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_mac(s: &str) -> Result<MacAddr, ApiError> {
    s.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid MAC address {s:?}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/devices", get(devices))
        .route("/devices/{mac}/label", post(label))
        .route("/tokens", get(tokens))
        .route("/tokens/{id}/associate", post(associate))
        .route("/pots", get(pots))
        .route("/pots/{id}/configure", post(configure))
        .route("/reader/{id}/state", post(reader_state))
        .route("/activations", get(activations))
        .route("/anomalies", get(anomalies))
        .route("/metrics/latency", get(latency))
        .route("/profiles", get(profiles))
        .route("/state", get(canonical_state))
        .route("/events", get(events))
        .with_state(state)
}

async fn devices(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).devices()))
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
}

async fn label(
    State(s): State<AppState>,
    Path(mac): Path<String>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> ApiResult<Value> {
    let mac = parse_mac(&mac)?;
    let Json(body) = body?;
    lock(&s.gateway).set_label(mac, &body.label)?;
    Ok(Json(json!({ "mac": mac, "label": body.label })))
}

async fn tokens(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).tokens()))
}

#[derive(Deserialize)]
struct AssociateBody {
    macs: Vec<String>,
    #[serde(default)]
    label: String,
}

async fn associate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AssociateBody>, JsonRejection>,
) -> ApiResult<Value> {
    let Json(body) = body?;
    let macs = body.macs.iter().map(|m| parse_mac(m)).collect::<Result<Vec<_>, _>>()?;
    let out = lock(&s.gateway).associate(&id, &body.label, macs)?;
    Ok(Json(json!(out)))
}

async fn pots(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).pots()))
}

#[derive(Deserialize)]
struct ConfigureBody {
    actions: Vec<ControlAction>,
    modality: Modality,
}

async fn configure(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ConfigureBody>, JsonRejection>,
) -> ApiResult<Value> {
    let Json(body) = body?;
    let out = lock(&s.gateway).configure(&id, body.actions, body.modality)?;
    Ok(Json(json!(out)))
}

/// Virtual reader: the body is the bus payload, with `ts` optional.
async fn reader_state(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Value>, JsonRejection>,
) -> ApiResult<Value> {
    let Json(mut body) = body?;
    let mut g = lock(&s.gateway);
    if let Value::Object(map) = &mut body {
        if !map.contains_key("ts") {
            map.insert("ts".into(), json!(g.now()));
        }
    }
    let msg = BusMessage {
        topic: format!("dada/reader/{id}/state"),
        payload: serde_json::to_vec(&body).expect("value serializes"),
    };
    let out = g.handle_bus_message(&msg)?;
    Ok(Json(json!(out)))
}

async fn activations(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).activations()))
}

async fn anomalies(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).anomalies()))
}

async fn latency(State(s): State<AppState>) -> Json<Value> {
    let g = lock(&s.gateway);
    Json(json!({ "packets": g.packets_processed(), "report": g.latency() }))
}

async fn profiles(State(s): State<AppState>) -> Json<Value> {
    Json(json!(lock(&s.gateway).export_profiles()))
}

async fn canonical_state(State(s): State<AppState>) -> Response {
    let bytes = lock(&s.gateway).canonical_state();
    ([(axum::http::header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn to_sse(s: &Sequenced) -> Event {
    Event::default()
        .id(s.id.to_string())
        .event(s.event.name())
        .json_data(&s.event)
        .expect("event serializes")
}

/// Streams events in order. A client that falls too far behind is
/// disconnected and can resume with `Last-Event-ID`.
async fn events(State(s): State<AppState>, headers: HeaderMap) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let sub = lock(&s.gateway).subscribe(last_id);
    let backlog = stream::iter(sub.backlog.iter().map(to_sse).map(Ok).collect::<Vec<_>>());
    let live = stream::unfold((sub.live, s.shutdown), |(mut rx, mut shutdown)| async move {
        loop {
            if *shutdown.borrow() {
                return None;
            }
            tokio::select! {
                r = rx.recv() => match r {
                    Ok(ev) => return Some((Ok(to_sse(&ev)), (rx, shutdown))),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!(missed = n, "event stream client lagged, closing");
                        return None;
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                },
                r = shutdown.changed() => if r.is_err() { return None },
            }
        }
    });
    Sse::new(backlog.chain(live)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}
