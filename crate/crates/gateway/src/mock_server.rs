//! A chat-completions server backed by [`DeterministicMock`], for exercising
//! the HTTP upstream end to end.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use futures::StreamExt;
use ric_core::{Context, DeterministicMock, Message, Role};
use serde_json::json;

use crate::wire::{ChatRequest, INTERRUPTION_NAME};

pub fn router(mock: DeterministicMock) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(complete))
        .with_state(Arc::new(mock))
}

/// The mock's view of a request: interruptions are dropped, so it resumes
/// from the assistant text alone.
fn context_from(request: &ChatRequest) -> Context {
    let messages = request
        .messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.name.as_deref() != Some(INTERRUPTION_NAME))
        .filter_map(|(i, m)| {
            let content = m.content_str().unwrap_or_default();
            match m.role.as_str() {
                "system" if i == 0 => Some(Message::system(content)),
                "assistant" => Some(Message::assistant(content)),
                "user" => Some(Message::user(content)),
                _ => None,
            }
        })
        .collect::<Vec<_>>();
    Context::new(messages).unwrap_or_else(|_| Context::empty())
}

async fn complete(State(mock): State<Arc<DeterministicMock>>, body: Bytes) -> Response {
    let request = match ChatRequest::parse(&body) {
        Ok(request) => request,
        Err(err) => return (StatusCode::BAD_REQUEST, err.to_string()).into_response(),
    };
    let context = context_from(&request);
    debug_assert!(context.messages().iter().all(|m| m.role() != Role::Interruption));
    let frames = mock.stream_for(&context).map(|item| {
        let payload = match item {
            Ok(text) => json!({ "choices": [{ "index": 0, "delta": { "content": text } }] }),
            Err(err) => json!({ "error": { "message": err.message } }),
        };
        Ok::<_, std::convert::Infallible>(Bytes::from(format!("data: {payload}\n\n")))
    });
    let frames = frames.chain(futures::stream::once(async {
        Ok(Bytes::from_static(b"data: [DONE]\n\n"))
    }));
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .body(Body::from_stream(frames))
        .unwrap_or_else(|_| StatusCode::INTERNAL_SERVER_ERROR.into_response())
}
