//! Test harness: in-process servers, an HTTP client and reference oracles.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use ric_core::DeterministicMock;
use ric_gateway::http::{parse_sse, CONVERSATION_HEADER};
use ric_gateway::{router, Gateway, GatewayConfig, ProxyEvent};
use serde_json::{json, Value};

pub struct Server {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    pub client: reqwest::Client,
}

async fn listen(app: axum::Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    addr
}

/// Starts a gateway from config text; an `audit_log` key is added when
/// `audit` is given.
pub async fn spawn(config: &str, audit: Option<&Path>) -> Server {
    let mut source = config.to_owned();
    if let Some(path) = audit {
        source.push_str(&format!("\naudit_log = {}\n", serde_json::to_string(&path).unwrap()));
    }
    let config = GatewayConfig::parse(&source).unwrap();
    let gateway = Arc::new(Gateway::new(config).unwrap());
    let addr = listen(router(gateway.clone())).await;
    Server {
        addr,
        gateway,
        client: reqwest::Client::new(),
    }
}

/// Starts a chat-completions mock and returns its endpoint URL.
pub async fn spawn_mock(mock: DeterministicMock) -> String {
    let addr = listen(ric_gateway::mock_server::router(mock)).await;
    format!("http://{addr}/v1/chat/completions")
}

impl Server {
    pub async fn post(&self, path: &str, conv: Option<&str>, body: &Value) -> (u16, String) {
        let mut request = self
            .client
            .post(format!("http://{}{path}", self.addr))
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(conv) = conv {
            request = request.header(CONVERSATION_HEADER, conv);
        }
        let response = request.send().await.unwrap();
        let status = response.status().as_u16();
        (status, response.text().await.unwrap())
    }

    pub async fn transform(&self, conv: Option<&str>, body: &Value) -> (u16, Value) {
        let (status, text) = self.post("/v1/transform", conv, body).await;
        (status, serde_json::from_str(&text).unwrap())
    }

    pub async fn proxy(&self, conv: Option<&str>, body: &Value) -> (u16, Vec<ProxyEvent>) {
        let (status, text) = self.post("/v1/chat/completions", conv, body).await;
        if status != 200 {
            return (status, Vec::new());
        }
        let events = parse_sse(&text)
            .iter()
            .map(|e| ProxyEvent::from_sse(e).expect("well-formed event"))
            .collect();
        (status, events)
    }

    pub async fn metrics(&self) -> std::collections::BTreeMap<String, f64> {
        let text = self
            .client
            .get(format!("http://{}/metrics", self.addr))
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap();
        ric_gateway::metrics::parse_metrics(&text)
    }
}

pub fn chat(messages: &[(&str, &str)]) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|(role, content)| json!({ "role": role, "content": content }))
        .collect();
    json!({ "model": "test", "messages": messages })
}

/// Concatenated content, content runs between interruptions, and
/// interruption offsets of a proxied stream.
pub struct Summary {
    pub text: String,
    pub spans: usize,
    pub offsets: Vec<u64>,
    pub ids: Vec<u64>,
    pub terminal: Option<ProxyEvent>,
}

pub fn summarize(events: &[ProxyEvent]) -> Summary {
    let mut s = Summary {
        text: String::new(),
        spans: 0,
        offsets: Vec::new(),
        ids: Vec::new(),
        terminal: None,
    };
    let mut in_span = false;
    for e in events {
        match e {
            ProxyEvent::Content(t) => {
                s.text.push_str(t);
                if !in_span {
                    s.spans += 1;
                    in_span = true;
                }
            }
            ProxyEvent::Interruption(r) => {
                in_span = false;
                s.offsets.push(r.offset_tokens);
                s.ids.push(r.id);
            }
            other => s.terminal = Some(other.clone()),
        }
    }
    s
}

/// Byte ranges of default-rule tokens by a direct character scan.
pub fn scan_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut tokens: Vec<(usize, usize)> = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let end = i + c.len_utf8();
        if c.is_whitespace() {
            in_word = false;
        } else if c.is_alphanumeric() {
            if in_word {
                tokens.last_mut().unwrap().1 = end;
            } else {
                tokens.push((i, end));
            }
            in_word = true;
        } else {
            tokens.push((i, end));
            in_word = false;
        }
    }
    tokens
}

pub fn scan_count(text: &str) -> u64 {
    scan_tokens(text).len() as u64
}

pub fn expected_offsets(l: u64, t: u64) -> Vec<u64> {
    (1..).map(|k| k * t).take_while(|&o| o < l).collect()
}

/// Expected inline rendering with the default sentinels.
pub fn expected_inline(text: &str, t: u64, first_id: u64, interruption: &str) -> String {
    let tokens = scan_tokens(text);
    let mut out = String::new();
    let mut last = 0;
    for (k, off) in expected_offsets(tokens.len() as u64, t).into_iter().enumerate() {
        let end = tokens[off as usize - 1].1;
        out.push_str(&text[last..end]);
        out.push_str(&format!(
            "[[RIC-INT id={} off={off}]]{interruption}[[/RIC-INT]]",
            first_id + k as u64
        ));
        last = end;
    }
    out.push_str(&text[last..]);
    out
}

pub const WORDS: &[&str] = &[
    "alpha", "b", "42", "x1", "naïve", "日本語", "über", "Ωmega", "ß", "3.14", "a_b", "don't",
    ",", ".", "!", "?", "—", "(", ")", "😀", "#", "&&", "->", "'", "\"",
];
pub const SPACES: &[&str] = &[" ", "  ", "\n", "\t", " \n ", "", "\u{00a0}", "\r\n"];

pub fn random_text(rng: &mut impl rand_core::RngCore, max_words: u32) -> String {
    let n = rng.next_u32() % (max_words + 1);
    let mut out = String::new();
    for _ in 0..n {
        out.push_str(WORDS[rng.next_u32() as usize % WORDS.len()]);
        out.push_str(SPACES[rng.next_u32() as usize % SPACES.len()]);
    }
    out
}

/// `n` distinct words, one token each.
pub fn words(n: u64, salt: &str) -> String {
    (0..n).map(|i| format!("{salt}{i}")).collect::<Vec<_>>().join(" ")
}

/// Removes sentinel blocks using only the default marker shapes.
pub fn oracle_strip(text: &str) -> String {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find("[[RIC-INT id=") {
        out.push_str(&rest[..start]);
        let close = rest[start..].find("[[/RIC-INT]]").expect("closed block") + start;
        rest = &rest[close + "[[/RIC-INT]]".len()..];
    }
    out.push_str(rest);
    out
}

pub fn audit_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
