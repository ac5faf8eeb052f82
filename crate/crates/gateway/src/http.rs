use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};

use crate::error::GatewayError;
use crate::service::{Gateway, ProxyEvent};

/// Header naming the conversation a request belongs to.
pub const CONVERSATION_HEADER: &str = "x-conversation-id";

pub fn router(gateway: Arc<Gateway>) -> Router {
    let limit = gateway.config().max_body_bytes;
    Router::new()
        .route("/v1/transform", post(transform))
        .route("/v1/chat/completions", post(proxy))
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(gateway)
}

fn conversation(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(CONVERSATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
}

async fn transform(
    State(gateway): State<Arc<Gateway>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, GatewayError> {
    let response = gateway.transform(conversation(&headers), &body).await?;
    Ok(Json(response).into_response())
}

async fn proxy(
    State(gateway): State<Arc<Gateway>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, GatewayError> {
    let events = gateway.proxy(conversation(&headers), &body).await?;
    let stream = stream::unfold(events, |mut events| async move {
        let event = events.recv().await?;
        let sse = Event::default().event(event.name()).data(event.data().to_string());
        Some((Ok(sse), events))
    });
    Ok(Sse::new(stream))
}

async fn metrics(State(gateway): State<Arc<Gateway>>) -> impl IntoResponse {
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        gateway.metrics_text(),
    )
}

/// One parsed server-sent event.
#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub event: String,
    pub data: String,
}

/// Splits a complete event-stream body into events.
pub fn parse_sse(body: &str) -> Vec<SseEvent> {
    let mut out = Vec::new();
    for block in body.replace("\r\n", "\n").split("\n\n") {
        let mut event = String::from("message");
        let mut data: Vec<&str> = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = v.trim_start().to_owned();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        if !data.is_empty() {
            out.push(SseEvent {
                event,
                data: data.join("\n"),
            });
        }
    }
    out
}

impl ProxyEvent {
    /// Inverse of the event rendering, for clients.
    pub fn from_sse(event: &SseEvent) -> Option<ProxyEvent> {
        let v: serde_json::Value = serde_json::from_str(&event.data).ok()?;
        Some(match event.event.as_str() {
            "content" => ProxyEvent::Content(v["text"].as_str()?.to_owned()),
            "interruption" => ProxyEvent::Interruption(serde_json::from_value(v).ok()?),
            "error" => ProxyEvent::Error {
                message: v["message"].as_str()?.to_owned(),
                partial_tokens: v["partial_tokens"].as_u64()?,
                interruptions: v["interruptions"].as_u64()?,
            },
            "done" => ProxyEvent::Done {
                tokens: v["tokens"].as_u64()?,
                interruptions: v["interruptions"].as_u64()?,
                ratio: v["ratio"].as_f64(),
            },
            _ => return None,
        })
    }
}
