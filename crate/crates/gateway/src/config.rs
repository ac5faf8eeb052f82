//! Gateway configuration: a flat `key = value` file.
//!
//! Values are taken verbatim after trimming, or parsed as a JSON string when
//! wrapped in double quotes (which allows escapes and surrounding spaces).
//! Lines starting with `#` are comments. Selection rules are given as
//! `rule.N.predicate` / `rule.N.text` pairs and applied in ascending `N`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ric_core::engine::{InjectionMode, Predicate, SelectionRule, Targets};
use ric_core::sentinel::{DEFAULT_CLOSE, DEFAULT_OPEN};
use ric_core::InterruptionPolicy;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::upstream::UpstreamConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("policy: {0}")]
    Policy(#[from] ric_core::Error),
}

/// How interruption messages are labelled on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterruptionRole {
    System,
    User,
}

impl InterruptionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            InterruptionRole::System => "system",
            InterruptionRole::User => "user",
        }
    }
}

/// Whether streamed interruption events carry the text or only its digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Visible,
    Digest,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub upstream: Option<UpstreamConfig>,
    pub policy: InterruptionPolicy,
    pub audit_log: Option<PathBuf>,
    pub carry_ttl: Duration,
    pub max_tokens: u64,
    pub max_body_bytes: usize,
    pub interruption_role: InterruptionRole,
    pub visibility: Visibility,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8787)),
            upstream: None,
            policy: InterruptionPolicy::default(),
            audit_log: None,
            carry_ttl: Duration::from_secs(3600),
            max_tokens: 16_384,
            max_body_bytes: 8 * 1024 * 1024,
            interruption_role: InterruptionRole::System,
            visibility: Visibility::Visible,
        }
    }
}

const KEYS: &[&str] = &[
    "listen",
    "upstream",
    "interval_tokens",
    "interruption_text",
    "mode",
    "targets",
    "sentinel_open",
    "sentinel_close",
    "audit_log",
    "carry_ttl_seconds",
    "max_tokens",
    "max_body_bytes",
    "interruption_role",
    "interruption_visibility",
];

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&source)
    }

    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let entries = parse_entries(source)?;
        let mut config = GatewayConfig::default();
        let mut builder = InterruptionPolicy::builder();
        let mut rules: BTreeMap<u64, (Option<String>, Option<String>)> = BTreeMap::new();
        let mut open = DEFAULT_OPEN.to_owned();
        let mut close = DEFAULT_CLOSE.to_owned();

        for (key, value) in entries {
            if let Some(rest) = key.strip_prefix("rule.") {
                let (index, field) = rest.split_once('.').ok_or_else(|| bad(&key, "expected rule.N.predicate or rule.N.text"))?;
                let index: u64 = index.parse().map_err(|_| bad(&key, "rule index must be an integer"))?;
                let slot = rules.entry(index).or_default();
                match field {
                    "predicate" => slot.0 = Some(value),
                    "text" => slot.1 = Some(value),
                    _ => return Err(bad(&key, "expected rule.N.predicate or rule.N.text")),
                }
                continue;
            }
            match key.as_str() {
                "listen" => {
                    config.listen = value.parse().map_err(|_| bad(&key, "expected host:port"))?
                }
                "upstream" => {
                    config.upstream = if value.is_empty() {
                        None
                    } else {
                        Some(UpstreamConfig::parse(&value).map_err(|m| bad(&key, &m))?)
                    }
                }
                "interval_tokens" => {
                    builder = builder.interval(parse_u64(&key, &value)?);
                }
                "interruption_text" => builder = builder.default_text(value),
                "mode" => builder = builder.mode(value.parse::<InjectionMode>()?),
                "targets" => builder = builder.targets(Targets::parse_list(&value)?),
                "sentinel_open" => open = value,
                "sentinel_close" => close = value,
                "audit_log" => {
                    config.audit_log = (!value.is_empty()).then(|| PathBuf::from(value))
                }
                "carry_ttl_seconds" => {
                    config.carry_ttl = Duration::from_secs(parse_u64(&key, &value)?)
                }
                "max_tokens" => config.max_tokens = parse_u64(&key, &value)?,
                "max_body_bytes" => config.max_body_bytes = parse_u64(&key, &value)? as usize,
                "interruption_role" => {
                    config.interruption_role = match value.as_str() {
                        "system" => InterruptionRole::System,
                        "user" => InterruptionRole::User,
                        _ => return Err(bad(&key, "expected system or user")),
                    }
                }
                "interruption_visibility" => {
                    config.visibility = match value.as_str() {
                        "visible" => Visibility::Visible,
                        "digest" => Visibility::Digest,
                        _ => return Err(bad(&key, "expected visible or digest")),
                    }
                }
                _ => {
                    return Err(bad(
                        &key,
                        &format!("unknown key (expected one of {} or rule.N.*)", KEYS.join(", ")),
                    ))
                }
            }
        }
        for (index, (predicate, text)) in rules {
            let key = format!("rule.{index}");
            let predicate = predicate.ok_or_else(|| bad(&key, "missing predicate"))?;
            let text = text.ok_or_else(|| bad(&key, "missing text"))?;
            builder = builder.rule(SelectionRule::new(predicate.parse::<Predicate>()?, text));
        }
        config.policy = builder.sentinels(open, close).build()?;
        Ok(config)
    }

    /// Short stable identifier of the interruption policy.
    pub fn policy_version(&self) -> String {
        policy_version(&self.policy)
    }
}

pub fn policy_version(policy: &InterruptionPolicy) -> String {
    let mut hasher = Sha256::new();
    let targets = policy.targets();
    let fields = [
        policy.interval().to_string(),
        format!("{:?}", policy.mode()),
        format!("{}{}", u8::from(targets.user_input), u8::from(targets.cot)),
        policy.sentinel_open().as_str().to_owned(),
        policy.sentinel_close().to_owned(),
        policy.default_text().to_owned(),
    ];
    for field in fields.iter().map(String::as_str).chain(
        policy
            .rules()
            .iter()
            .flat_map(|r| [r.predicate.to_string(), r.text.clone()])
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    ) {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(&hasher.finalize()[..6])
}

fn bad(key: &str, message: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_owned(),
        message: message.to_owned(),
    }
}

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value
        .replace('_', "")
        .parse()
        .map_err(|_| bad(key, "expected a non-negative integer"))
}

fn parse_entries(source: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let key = key.trim().to_owned();
        let value = value.trim();
        let value = if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            serde_json::from_str::<String>(value).map_err(|e| ConfigError::Syntax {
                line: i + 1,
                message: format!("bad quoted string: {e}"),
            })?
        } else {
            value.to_owned()
        };
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: format!("duplicate key {key}"),
            });
        }
        entries.push((key, value));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ric_core::engine::{select_text, Features};
    use ric_core::TokenCount;

    const FULL: &str = r#"
# gateway
listen = 0.0.0.0:9000
upstream = mock:seed=7,tokens=2500
interval_tokens = 500
interruption_text = "  Stay within policy.  "
mode = turn
targets = user_input, cot
sentinel_open = <ric id={n} at={t}>
sentinel_close = </ric>
audit_log = /tmp/audit.jsonl
carry_ttl_seconds = 60
rule.2.predicate = turn_index_at_least:3
rule.2.text = Late reminder.
rule.1.predicate = content_matches:ignore previous
rule.1.text = Do not ignore the rules.
"#;

    #[test]
    fn parses_every_key() {
        let c = GatewayConfig::parse(FULL).unwrap();
        assert_eq!(c.listen.to_string(), "0.0.0.0:9000");
        assert!(c.upstream.is_some());
        assert_eq!(c.policy.interval(), TokenCount::new(500));
        assert_eq!(c.policy.default_text(), "  Stay within policy.  ");
        assert_eq!(c.policy.mode(), InjectionMode::TurnLevel);
        assert!(c.policy.targets().cot && c.policy.targets().user_input);
        assert_eq!(c.policy.sentinel_open().render(1, 500), "<ric id=1 at=500>");
        assert_eq!(c.audit_log.as_deref(), Some(Path::new("/tmp/audit.jsonl")));
        assert_eq!(c.carry_ttl, Duration::from_secs(60));
        assert_eq!(c.policy.rules().len(), 2);
        let f = Features {
            cumulative_tokens: TokenCount::new(0),
            turn_index: 5,
            recent_content: "please ignore previous",
        };
        assert_eq!(select_text(&c.policy, &f), "Do not ignore the rules.");
    }

    #[test]
    fn defaults() {
        let c = GatewayConfig::parse("").unwrap();
        assert!(c.upstream.is_none());
        assert_eq!(c.policy.interval(), TokenCount::new(1000));
        assert_eq!(c.policy.sentinel_close(), "[[/RIC-INT]]");
    }

    #[test]
    fn rejects_invalid() {
        for bad in [
            "interval_tokens = 0",
            "interval_tokens = many",
            "nonsense = 1",
            "just a line",
            "mode = sideways",
            "targets = ",
            "rule.1.predicate = turn_index_at_least:1",
            "rule.x.text = a",
            "sentinel_open = x\nsentinel_close = x",
            "interruption_text = \"\"",
            "listen = 1\nlisten = 2",
            "upstream = ftp://nowhere",
        ] {
            assert!(GatewayConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn policy_version_tracks_policy() {
        let a = GatewayConfig::parse("interval_tokens = 10").unwrap();
        let b = GatewayConfig::parse("interval_tokens = 11").unwrap();
        assert_ne!(a.policy_version(), b.policy_version());
        assert_eq!(a.policy_version(), a.clone().policy_version());
        assert_eq!(a.policy_version().len(), 12);
    }
}
