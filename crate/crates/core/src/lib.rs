//! Reinforcement in context: periodic interruption text injected into long
//! LLM contexts, with exact token accounting of the system-controlled share.
//!
//! * [`tokens`]: token counting and interval splitting
//! * [`context`]: conversation model and measured system share
//! * [`engine`]: injection planning, inline and turn-level injection, stripping
//! * [`cot`]: halt/inject/resume interleaving over a streaming upstream
//! * [`scaling`]: the closed-form ratio model, bounds and sweeps

pub mod context;
pub mod cot;
pub mod engine;
pub mod error;
pub mod mock;
pub mod ratio;
pub mod scaling;
pub mod sentinel;
pub mod tokens;

pub use context::{system_share, system_share_with, Context, Message, Provenance, RatioReport, Role};
pub use cot::{run_interleaved, GenerationSession, Interleaved, SessionEvent, SessionFailed, SessionState, Upstream, UpstreamError};
pub use engine::{
    inject_inline, inject_turns, plan_injections, select_text, strip_interruptions, InjectionMode,
    InterruptionPolicy, InterruptionRecord, RecordMode, TurnCarry,
};
pub use error::{Error, Result};
pub use mock::DeterministicMock;
pub use ratio::Rational;
pub use tokens::{count_tokens, split_at_intervals, Segment, TokenCount, Tokenizer};
