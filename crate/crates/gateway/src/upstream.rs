//! Upstream model endpoints: the in-process deterministic mock and an HTTP
//! client for streaming chat-completion servers.

use std::collections::VecDeque;

use bytes::Bytes;
use futures::future::BoxFuture;
use futures::stream::{self, BoxStream, StreamExt};
use ric_core::cot::TokenStream;
use ric_core::{Context, DeterministicMock, Upstream, UpstreamError};
use serde_json::{Map, Value};

use crate::config::InterruptionRole;
use crate::wire::context_to_wire;

#[derive(Debug, Clone)]
pub enum UpstreamConfig {
    /// `mock:seed=S,tokens=N[,refuse_after=K][,chunk=B]`
    Mock(DeterministicMock),
    /// `http://host:port/path` of a streaming chat-completions endpoint.
    Http(String),
}

impl UpstreamConfig {
    pub fn parse(source: &str) -> Result<Self, String> {
        if let Some(spec) = source.strip_prefix("mock:") {
            let mut seed = 0;
            let mut tokens = None;
            let mut refuse_after = None;
            let mut chunk = None;
            for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| format!("mock option {item:?} needs a value"))?;
                let v: u64 = v
                    .parse()
                    .map_err(|_| format!("mock option {k}: expected an integer"))?;
                match k {
                    "seed" => seed = v,
                    "tokens" => tokens = Some(v),
                    "refuse_after" => refuse_after = Some(v),
                    "chunk" => chunk = Some(v as usize),
                    other => return Err(format!("unknown mock option {other:?}")),
                }
            }
            let mut mock = DeterministicMock::new(seed, tokens.ok_or("mock upstream needs tokens=N")?);
            if let Some(n) = refuse_after {
                mock = mock.refuse_after(n);
            }
            if let Some(n) = chunk {
                mock = mock.chunk_bytes(n);
            }
            return Ok(UpstreamConfig::Mock(mock));
        }
        if source.starts_with("http://") {
            return Ok(UpstreamConfig::Http(source.to_owned()));
        }
        if source.starts_with("https://") {
            return Err("TLS upstreams are not supported; use plain http behind a local proxy".into());
        }
        Err(format!("unsupported upstream {source:?}"))
    }
}

/// Streaming chat-completions client.
///
/// Each `start` posts the request template with the given context as
/// `messages` and `stream: true`, then yields `choices[0].delta.content`
/// from the server-sent `data:` lines until `[DONE]`.
pub struct HttpUpstream {
    client: reqwest::Client,
    url: String,
    template: Map<String, Value>,
    interruption_role: InterruptionRole,
}

impl HttpUpstream {
    pub fn new(
        client: reqwest::Client,
        url: String,
        template: Map<String, Value>,
        interruption_role: InterruptionRole,
    ) -> Self {
        HttpUpstream {
            client,
            url,
            template,
            interruption_role,
        }
    }
}

impl Upstream for HttpUpstream {
    fn start<'a>(&'a self, context: &'a Context) -> BoxFuture<'a, Result<TokenStream, UpstreamError>> {
        Box::pin(async move {
            let mut body = self.template.clone();
            let messages = context_to_wire(context, self.interruption_role);
            body.insert(
                "messages".into(),
                serde_json::to_value(messages).map_err(|e| UpstreamError::new(e.to_string()))?,
            );
            body.insert("stream".into(), Value::Bool(true));
            let payload = serde_json::to_vec(&body).map_err(|e| UpstreamError::new(e.to_string()))?;
            let response = self
                .client
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .header(reqwest::header::ACCEPT, "text/event-stream")
                .body(payload)
                .send()
                .await
                .map_err(|e| UpstreamError::new(format!("request failed: {e}")))?;
            let status = response.status();
            if !status.is_success() {
                let text = response.text().await.unwrap_or_default();
                return Err(UpstreamError::new(format!("upstream returned {status}: {text}")));
            }
            let bytes = response
                .bytes_stream()
                .map(|chunk| chunk.map_err(|e| UpstreamError::new(format!("stream error: {e}"))))
                .boxed();
            Ok(sse_deltas(bytes))
        })
    }
}

struct SseState {
    bytes: BoxStream<'static, Result<Bytes, UpstreamError>>,
    buffer: Vec<u8>,
    ready: VecDeque<Result<String, UpstreamError>>,
    finished: bool,
}

/// Extracts content deltas from an OpenAI-style event stream.
pub fn sse_deltas(bytes: BoxStream<'static, Result<Bytes, UpstreamError>>) -> TokenStream {
    let state = SseState {
        bytes,
        buffer: Vec::new(),
        ready: VecDeque::new(),
        finished: false,
    };
    stream::unfold(state, |mut state| async move {
        loop {
            if let Some(item) = state.ready.pop_front() {
                if item.is_err() {
                    state.finished = true;
                    state.ready.clear();
                }
                return Some((item, state));
            }
            if state.finished {
                return None;
            }
            match state.bytes.next().await {
                Some(Ok(chunk)) => {
                    state.buffer.extend_from_slice(&chunk);
                    drain_lines(&mut state);
                }
                Some(Err(err)) => {
                    state.finished = true;
                    return Some((Err(err), state));
                }
                None => {
                    state.finished = true;
                    if !state.buffer.is_empty() {
                        state.buffer.push(b'\n');
                        drain_lines(&mut state);
                    }
                }
            }
        }
    })
    .boxed()
}

fn drain_lines(state: &mut SseState) {
    while let Some(pos) = state.buffer.iter().position(|&b| b == b'\n') {
        let line: Vec<u8> = state.buffer.drain(..=pos).collect();
        let line = String::from_utf8_lossy(&line);
        let line = line.trim_end_matches(['\r', '\n']);
        let Some(data) = line.strip_prefix("data:") else {
            continue;
        };
        let data = data.trim_start();
        if data == "[DONE]" {
            state.finished = true;
            state.buffer.clear();
            return;
        }
        match serde_json::from_str::<Value>(data) {
            Ok(value) => {
                if let Some(err) = value.get("error") {
                    let message = err
                        .get("message")
                        .and_then(Value::as_str)
                        .map_or_else(|| err.to_string(), str::to_owned);
                    state.ready.push_back(Err(UpstreamError::new(message)));
                    state.buffer.clear();
                    return;
                }
                let delta = value
                    .pointer("/choices/0/delta/content")
                    .and_then(Value::as_str);
                if let Some(text) = delta.filter(|t| !t.is_empty()) {
                    state.ready.push_back(Ok(text.to_owned()));
                }
            }
            Err(e) => {
                state
                    .ready
                    .push_back(Err(UpstreamError::new(format!("bad event payload: {e}"))));
                state.buffer.clear();
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::executor::block_on;

    fn deltas(chunks: &[&str]) -> Vec<Result<String, UpstreamError>> {
        let owned: Vec<Result<Bytes, UpstreamError>> = chunks
            .iter()
            .map(|c| Ok(Bytes::from(c.to_string())))
            .collect();
        block_on(sse_deltas(stream::iter(owned).boxed()).collect())
    }

    #[test]
    fn parses_split_events() {
        let out = deltas(&[
            "data: {\"choices\":[{\"delta\":{\"content\":\"he\"}}]}\n\nda",
            "ta: {\"choices\":[{\"delta\":{\"content\":\"llo\"}}]}\n\n",
            ": keep-alive\n\ndata: {\"choices\":[{\"delta\":{}}]}\n\n",
            "data: [DONE]\n\ndata: {\"choices\":[{\"delta\":{\"content\":\"late\"}}]}\n\n",
        ]);
        let text: Vec<String> = out.into_iter().map(Result::unwrap).collect();
        assert_eq!(text, vec!["he", "llo"]);
    }

    #[test]
    fn error_payload_ends_stream() {
        let out = deltas(&[
            "data: {\"choices\":[{\"delta\":{\"content\":\"a\"}}]}\n\n",
            "data: {\"error\":{\"message\":\"boom\"}}\n\n",
            "data: {\"choices\":[{\"delta\":{\"content\":\"b\"}}]}\n\n",
        ]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].as_ref().unwrap_err().message, "boom");
    }

    #[test]
    fn parses_upstream_specs() {
        assert!(matches!(
            UpstreamConfig::parse("mock:seed=3,tokens=10,refuse_after=4,chunk=2"),
            Ok(UpstreamConfig::Mock(_))
        ));
        assert!(matches!(
            UpstreamConfig::parse("http://127.0.0.1:9/v1/chat/completions"),
            Ok(UpstreamConfig::Http(_))
        ));
        assert!(UpstreamConfig::parse("mock:seed=3").is_err());
        assert!(UpstreamConfig::parse("mock:tokens=x").is_err());
        assert!(UpstreamConfig::parse("https://x").is_err());
        assert!(UpstreamConfig::parse("ws://x").is_err());
    }
}
