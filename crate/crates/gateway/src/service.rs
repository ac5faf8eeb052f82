//! Request handling independent of the HTTP framing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ric_core::engine::{inject_inline_at, Targets};
use ric_core::ratio::to_f64;
use ric_core::{
    count_tokens, inject_turns, system_share, system_share_with, Context, InjectionMode,
    InterruptionPolicy, InterruptionRecord, Role, SessionEvent, TokenCount, Upstream,
};
use serde_json::{json, Map, Value};
use tokio::sync::mpsc;

use crate::audit::{text_digest, AuditEntry, AuditLog};
use crate::config::{GatewayConfig, Visibility};
use crate::conversations::{digest_messages, ConversationState, ConversationStore};
use crate::error::GatewayError;
use crate::metrics::Metrics;
use crate::upstream::{HttpUpstream, UpstreamConfig};
use crate::wire::{context_to_wire, ChatRequest, TransformResponse, WireRecord};

/// One server-sent event of a proxied generation.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxyEvent {
    Content(String),
    Interruption(WireRecord),
    Error {
        message: String,
        partial_tokens: u64,
        interruptions: u64,
    },
    Done {
        tokens: u64,
        interruptions: u64,
        ratio: Option<f64>,
    },
}

impl ProxyEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ProxyEvent::Content(_) => "content",
            ProxyEvent::Interruption(_) => "interruption",
            ProxyEvent::Error { .. } => "error",
            ProxyEvent::Done { .. } => "done",
        }
    }

    pub fn data(&self) -> Value {
        match self {
            ProxyEvent::Content(text) => json!({ "text": text }),
            ProxyEvent::Interruption(record) => serde_json::to_value(record).unwrap_or(Value::Null),
            ProxyEvent::Error {
                message,
                partial_tokens,
                interruptions,
            } => json!({
                "message": message,
                "partial_tokens": partial_tokens,
                "interruptions": interruptions,
            }),
            ProxyEvent::Done {
                tokens,
                interruptions,
                ratio,
            } => json!({ "tokens": tokens, "interruptions": interruptions, "ratio": ratio }),
        }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    /// Same policy with no chain-of-thought cadence, for relaying upstream
    /// output untouched.
    passthrough: InterruptionPolicy,
    policy_version: String,
    audit: AuditLog,
    metrics: Metrics,
    conversations: ConversationStore,
    client: reqwest::Client,
    anonymous: AtomicU64,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> std::io::Result<Self> {
        let audit = match &config.audit_log {
            Some(path) => AuditLog::open(path)?,
            None => AuditLog::discard(),
        };
        let policy = &config.policy;
        let passthrough = InterruptionPolicy::builder()
            .interval(u64::MAX)
            .default_text(policy.default_text())
            .rules(policy.rules().iter().cloned())
            .mode(policy.mode())
            .targets(Targets {
                user_input: false,
                cot: true,
            })
            .sentinels(policy.sentinel_open().as_str(), policy.sentinel_close())
            .build()
            .map_err(std::io::Error::other)?;
        Ok(Gateway {
            policy_version: config.policy_version(),
            conversations: ConversationStore::new(config.carry_ttl),
            config,
            passthrough,
            audit,
            metrics: Metrics::default(),
            client: reqwest::Client::new(),
            anonymous: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn policy(&self) -> &InterruptionPolicy {
        &self.config.policy
    }

    pub fn policy_version(&self) -> &str {
        &self.policy_version
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn metrics_text(&self) -> String {
        self.metrics
            .render(self.audit.entries_written(), self.conversations.ratio_summary())
    }

    /// Rewrites the inbound messages and returns them without calling an
    /// upstream.
    pub async fn transform(
        &self,
        conversation: Option<&str>,
        body: &[u8],
    ) -> Result<TransformResponse, GatewayError> {
        Metrics::incr(&self.metrics.requests);
        Metrics::incr(&self.metrics.transform_requests);
        let request = self.parse(body)?;
        let (conv, mut state) = self.conversation(conversation).await;
        let (context, records) = self.apply_inbound(&conv, &mut state, &request)?;
        let ratio = (!context.total_length().is_zero())
            .then(|| {
                system_share_with(&context, self.policy().interval(), self.policy().interruption_len())
            })
            .transpose()
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        let records = records.iter().map(|r| self.wire_record(r)).collect();
        Ok(TransformResponse {
            conversation_id: conv,
            policy_version: self.policy_version.clone(),
            messages: context_to_wire(&context, self.config.interruption_role),
            records,
            ratio: ratio.as_ref().map(Into::into),
        })
    }

    /// Transforms the inbound messages, then streams a generation from the
    /// upstream with chain-of-thought interruptions. Interruptions placed in
    /// the inbound messages are reported first.
    pub async fn proxy(
        self: &Arc<Self>,
        conversation: Option<&str>,
        body: &[u8],
    ) -> Result<mpsc::UnboundedReceiver<ProxyEvent>, GatewayError> {
        Metrics::incr(&self.metrics.requests);
        Metrics::incr(&self.metrics.proxy_requests);
        let Some(upstream) = self.config.upstream.clone() else {
            Metrics::incr(&self.metrics.rejected_requests);
            return Err(GatewayError::ProxyDisabled);
        };
        let request = self.parse(body)?;
        let (conv, mut state) = self.conversation(conversation).await;
        let (context, inbound) = self.apply_inbound(&conv, &mut state, &request)?;
        let max_tokens = TokenCount::new(request.max_tokens.unwrap_or(self.config.max_tokens));
        let upstream: Box<dyn Upstream> = match upstream {
            UpstreamConfig::Mock(mock) => Box::new(mock),
            UpstreamConfig::Http(url) => {
                let mut template = Map::new();
                if let Some(model) = &request.model {
                    template.insert("model".into(), Value::String(model.clone()));
                }
                template.extend(request.extra.clone());
                Box::new(HttpUpstream::new(
                    self.client.clone(),
                    url,
                    template,
                    self.config.interruption_role,
                ))
            }
        };

        let (tx, rx) = mpsc::unbounded_channel();
        for record in &inbound {
            let _ = tx.send(ProxyEvent::Interruption(self.wire_record(record)));
        }
        let gateway = Arc::clone(self);
        tokio::spawn(async move {
            let mut state = state;
            let policy = if gateway.policy().targets().cot {
                gateway.policy()
            } else {
                &gateway.passthrough
            };
            let base_system = context.system_prompt_tokens() + context.injected_tokens();
            let base_total = context.total_length();
            let mut injected = TokenCount::ZERO;
            let mut sink = |event: SessionEvent| match event {
                SessionEvent::Content(text) => {
                    let _ = tx.send(ProxyEvent::Content(text));
                }
                SessionEvent::Interruption(record) => {
                    injected += count_tokens(&record.text);
                    let total = base_total + record.offset_tokens + injected;
                    let ratio = (base_system + injected).get() as f64 / total.get() as f64;
                    gateway.audit_record(&conv, &record, ratio);
                    let _ = tx.send(ProxyEvent::Interruption(gateway.wire_record(&record)));
                }
            };
            let outcome = ric_core::cot::run_interleaved_with(
                context,
                policy,
                upstream.as_ref(),
                max_tokens,
                state.next_id,
                &mut sink,
            )
            .await;
            let event = match outcome {
                Ok(done) => {
                    state.next_id += done.records.len() as u64;
                    let ratio = system_share(&done.final_context).ok().map(|r| to_f64(&r.measured_ratio));
                    if let Some(ratio) = ratio {
                        gateway.conversations.record_ratio(&conv, ratio);
                    }
                    ProxyEvent::Done {
                        tokens: done.emitted_tokens.get(),
                        interruptions: (inbound.len() + done.records.len()) as u64,
                        ratio,
                    }
                }
                Err(failed) => {
                    Metrics::incr(&gateway.metrics.upstream_failures);
                    state.next_id += failed.partial.records.len() as u64;
                    tracing::warn!(conversation = %conv, error = %failed.cause, "upstream failed");
                    ProxyEvent::Error {
                        message: failed.cause.message,
                        partial_tokens: failed.partial.emitted_tokens.get(),
                        interruptions: (inbound.len() + failed.partial.records.len()) as u64,
                    }
                }
            };
            drop(state);
            // A zero budget yields an empty stream.
            if !max_tokens.is_zero() || matches!(event, ProxyEvent::Error { .. }) {
                let _ = tx.send(event);
            }
        });
        Ok(rx)
    }

    fn parse(&self, body: &[u8]) -> Result<ChatRequest, GatewayError> {
        ChatRequest::parse(body).inspect_err(|_| Metrics::incr(&self.metrics.rejected_requests))
    }

    async fn conversation(
        &self,
        id: Option<&str>,
    ) -> (String, tokio::sync::OwnedMutexGuard<ConversationState>) {
        match id {
            Some(id) => (id.to_owned(), self.conversations.lock(id).await),
            None => {
                // Without an id nothing is carried between requests.
                let n = self.anonymous.fetch_add(1, Ordering::Relaxed);
                let state = Arc::new(tokio::sync::Mutex::new(ConversationState::default()));
                (format!("anon-{n}"), state.lock_owned().await)
            }
        }
    }

    /// Validates the inbound messages and injects into the part of the
    /// history not seen before, reusing the stored transformed prefix.
    fn apply_inbound(
        &self,
        conv: &str,
        state: &mut ConversationState,
        request: &ChatRequest,
    ) -> Result<(Context, Vec<InterruptionRecord>), GatewayError> {
        let reject = |err: GatewayError| {
            match &err {
                GatewayError::Spoofed { .. } => Metrics::incr(&self.metrics.spoofing_rejections),
                GatewayError::SentinelCollision { .. } => {
                    Metrics::incr(&self.metrics.sentinel_collisions)
                }
                _ => {}
            }
            Metrics::incr(&self.metrics.rejected_requests);
            err
        };
        let messages = request.to_messages().map_err(reject)?;
        let policy = self.policy();
        if let Some(index) = messages.iter().position(|m| policy.collides(&m.content())) {
            return Err(reject(GatewayError::SentinelCollision { index }));
        }
        if let Some(index) = messages
            .iter()
            .skip(1)
            .position(|m| m.role() == Role::SystemPrompt)
        {
            return Err(reject(GatewayError::BadRequest(format!(
                "message {} is a system prompt; only the first message may be",
                index + 1
            ))));
        }

        let start = match state.reusable_prefix(&messages) {
            Some(n) => n,
            None => {
                state.reset();
                0
            }
        };
        let fresh = &messages[start..];
        let mut out = state.transformed.clone();
        let mut records = Vec::new();
        let internal = |e: ric_core::Error| GatewayError::Internal(e.to_string());
        if !policy.targets().user_input {
            out.extend(fresh.iter().cloned());
        } else {
            match policy.mode() {
                InjectionMode::Inline => {
                    for (j, message) in fresh.iter().enumerate() {
                        if message.role() != Role::User {
                            out.push(message.clone());
                            continue;
                        }
                        let (message, recs) =
                            inject_inline_at(message, policy, state.next_id, start + j).map_err(internal)?;
                        state.next_id += recs.len() as u64;
                        out.push(message);
                        records.extend(recs);
                    }
                }
                InjectionMode::TurnLevel => {
                    let slice = Context::new(fresh.to_vec()).map_err(internal)?;
                    let (slice, recs, carry) =
                        inject_turns(&slice, policy, state.carry, state.next_id).map_err(internal)?;
                    state.carry = carry;
                    state.next_id += recs.len() as u64;
                    out.extend(slice.into_messages());
                    records.extend(recs.into_iter().map(|mut r| {
                        r.message_index = r.message_index.map(|i| i + start);
                        r
                    }));
                }
            }
        }
        let context = Context::new(out).map_err(internal)?;
        state.watermark = messages.len();
        state.prefix_digest = digest_messages(&messages);
        state.transformed = context.messages().to_vec();

        if !context.total_length().is_zero() {
            let ratio = system_share(&context).map(|r| to_f64(&r.measured_ratio)).map_err(internal)?;
            for record in &records {
                self.audit_record(conv, record, ratio);
            }
            if !conv.starts_with("anon-") {
                self.conversations.record_ratio(conv, ratio);
            }
        }
        Ok((context, records))
    }

    fn audit_record(&self, conv: &str, record: &InterruptionRecord, ratio: f64) {
        self.metrics.injection(record.mode);
        let entry = AuditEntry::new(conv, record, &self.policy_version, ratio);
        if let Err(err) = self.audit.append(&entry) {
            tracing::error!(error = %err, "audit log write failed");
        }
    }

    fn wire_record(&self, record: &InterruptionRecord) -> WireRecord {
        match self.config.visibility {
            Visibility::Visible => WireRecord::new(record, Some(record.text.clone()), None),
            Visibility::Digest => WireRecord::new(
                record,
                None,
                Some(text_digest(&self.policy_version, &record.text)),
            ),
        }
    }
}

