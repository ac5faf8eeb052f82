//! Chat-completion request and response shapes.

use ric_core::ratio::{format_significant, to_f64};
use ric_core::{Context, InterruptionRecord, Message, RatioReport, Rational, Role};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::InterruptionRole;
use crate::error::GatewayError;

/// `name` given to interruption messages in serialised contexts.
pub const INTERRUPTION_NAME: &str = "interruption";

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<WireMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct WireMessage {
    pub role: String,
    pub content: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl WireMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        WireMessage {
            role: role.to_owned(),
            content: Value::String(content.into()),
            name: None,
        }
    }

    pub fn content_str(&self) -> Option<&str> {
        self.content.as_str()
    }
}

impl ChatRequest {
    pub fn parse(body: &[u8]) -> Result<Self, GatewayError> {
        serde_json::from_slice(body).map_err(|e| GatewayError::BadRequest(format!("malformed body: {e}")))
    }

    /// Converts the wire messages into external messages. Interruption roles
    /// are refused outright.
    pub fn to_messages(&self) -> Result<Vec<Message>, GatewayError> {
        self.messages
            .iter()
            .enumerate()
            .map(|(index, m)| {
                let role = match m.role.as_str() {
                    "system" => Role::SystemPrompt,
                    "user" => Role::User,
                    "assistant" => Role::Assistant,
                    "interruption" => return Err(GatewayError::Spoofed { index }),
                    other => {
                        return Err(GatewayError::BadRequest(format!(
                            "message {index}: unsupported role {other:?}"
                        )))
                    }
                };
                if m.name.as_deref() == Some(INTERRUPTION_NAME) {
                    return Err(GatewayError::Spoofed { index });
                }
                let content = m.content_str().ok_or_else(|| {
                    GatewayError::BadRequest(format!("message {index}: content must be a string"))
                })?;
                Message::new(role, content).map_err(|_| GatewayError::Spoofed { index })
            })
            .collect()
    }
}

pub fn to_wire(message: &Message, interruption_role: InterruptionRole) -> WireMessage {
    let (role, name) = match message.role() {
        Role::SystemPrompt => ("system", None),
        Role::User => ("user", None),
        Role::Assistant => ("assistant", None),
        Role::Interruption => (interruption_role.as_str(), Some(INTERRUPTION_NAME.to_owned())),
    };
    WireMessage {
        role: role.to_owned(),
        content: Value::String(message.content().into_owned()),
        name,
    }
}

pub fn context_to_wire(context: &Context, interruption_role: InterruptionRole) -> Vec<WireMessage> {
    context
        .messages()
        .iter()
        .map(|m| to_wire(m, interruption_role))
        .collect()
}

/// An exact rational with its decimal rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRatio {
    pub exact: String,
    pub decimal: String,
    pub value: f64,
}

impl From<&Rational> for WireRatio {
    fn from(r: &Rational) -> Self {
        WireRatio {
            exact: r.to_string(),
            decimal: format_significant(r, 9),
            value: to_f64(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRatioReport {
    pub s_tokens: u64,
    pub l_tokens: u64,
    pub measured_ratio: WireRatio,
    pub analytic_ratio: Option<WireRatio>,
    pub bound_q: Option<WireRatio>,
    pub measured_asymptote: Option<WireRatio>,
}

impl From<&RatioReport> for WireRatioReport {
    fn from(r: &RatioReport) -> Self {
        WireRatioReport {
            s_tokens: r.s_tokens.get(),
            l_tokens: r.l_tokens.get(),
            measured_ratio: (&r.measured_ratio).into(),
            analytic_ratio: r.analytic_ratio.as_ref().map(Into::into),
            bound_q: r.bound_q.as_ref().map(Into::into),
            measured_asymptote: r.measured_asymptote.as_ref().map(Into::into),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub id: u64,
    pub offset_tokens: u64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl WireRecord {
    pub fn new(record: &InterruptionRecord, text: Option<String>, digest: Option<String>) -> Self {
        WireRecord {
            id: record.id,
            offset_tokens: record.offset_tokens.get(),
            mode: record.mode.as_str().to_owned(),
            message_index: record.message_index,
            text,
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformResponse {
    pub conversation_id: String,
    pub policy_version: String,
    pub messages: Vec<WireMessage>,
    pub records: Vec<WireRecord>,
    /// Absent when the transformed context has no tokens.
    pub ratio: Option<WireRatioReport>,
}
