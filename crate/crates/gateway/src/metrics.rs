use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use ric_core::RecordMode;

/// Monotone counters exposed on `/metrics`.
#[derive(Debug, Default)]
pub struct Metrics {
    pub requests: AtomicU64,
    pub transform_requests: AtomicU64,
    pub proxy_requests: AtomicU64,
    pub rejected_requests: AtomicU64,
    pub spoofing_rejections: AtomicU64,
    pub sentinel_collisions: AtomicU64,
    pub injections_inline: AtomicU64,
    pub injections_turn_level: AtomicU64,
    pub injections_cot: AtomicU64,
    pub upstream_failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RatioSummary {
    pub conversations: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl RatioSummary {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut summary = RatioSummary {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            ..RatioSummary::default()
        };
        let mut sum = 0.0;
        for v in values {
            summary.conversations += 1;
            summary.min = summary.min.min(v);
            summary.max = summary.max.max(v);
            sum += v;
        }
        if summary.conversations == 0 {
            return RatioSummary::default();
        }
        summary.mean = sum / summary.conversations as f64;
        summary
    }
}

impl Metrics {
    pub fn incr(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn injection(&self, mode: RecordMode) {
        let counter = match mode {
            RecordMode::Inline => &self.injections_inline,
            RecordMode::TurnLevel => &self.injections_turn_level,
            RecordMode::Cot => &self.injections_cot,
        };
        Self::incr(counter);
    }

    /// `key value` lines.
    pub fn render(&self, audit_entries: u64, ratios: RatioSummary) -> String {
        let counters = [
            ("requests", &self.requests),
            ("transform_requests", &self.transform_requests),
            ("proxy_requests", &self.proxy_requests),
            ("rejected_requests", &self.rejected_requests),
            ("spoofing_rejections", &self.spoofing_rejections),
            ("sentinel_collisions", &self.sentinel_collisions),
            ("injections_inline", &self.injections_inline),
            ("injections_turn_level", &self.injections_turn_level),
            ("injections_cot", &self.injections_cot),
            ("upstream_failures", &self.upstream_failures),
        ];
        let mut out = String::new();
        for (name, counter) in counters {
            let _ = writeln!(out, "{name} {}", counter.load(Ordering::Relaxed));
        }
        let _ = writeln!(out, "audit_entries {audit_entries}");
        let _ = writeln!(out, "conversations {}", ratios.conversations);
        let _ = writeln!(out, "ratio_min {:.9}", ratios.min);
        let _ = writeln!(out, "ratio_max {:.9}", ratios.max);
        let _ = writeln!(out, "ratio_mean {:.9}", ratios.mean);
        out
    }
}

/// Parses `key value` lines back into pairs.
pub fn parse_metrics(text: &str) -> std::collections::BTreeMap<String, f64> {
    text.lines()
        .filter_map(|line| {
            let (k, v) = line.split_once(' ')?;
            Some((k.to_owned(), v.trim().parse().ok()?))
        })
        .collect()
}
