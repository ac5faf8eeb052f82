//! Chain-of-thought interleaving.
//!
//! The session streams model output from an [`Upstream`], halts it after
//! every `interval` emitted tokens, appends the partial output and an
//! interruption message to the working context and resumes by starting the
//! upstream again over that extended context. Only model-emitted tokens
//! count toward the interval.

use std::fmt;

use futures::future::BoxFuture;
use futures::stream::BoxStream;
use futures::StreamExt;
use thiserror::Error;

use crate::context::{Context, Message};
use crate::engine::{interruption_message, select_text, Features, InterruptionPolicy, InterruptionRecord, RecordMode};
use crate::error::{Error, Result};
use crate::tokens::{count_tokens, TokenCount, Tokenizer, WordPunct};

/// Failure reported by an upstream model endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("upstream failure: {message}")]
pub struct UpstreamError {
    pub message: String,
}

impl UpstreamError {
    pub fn new(message: impl Into<String>) -> Self {
        UpstreamError {
            message: message.into(),
        }
    }
}

/// Text deltas from one generation. Dropping the stream stops generation.
pub type TokenStream = BoxStream<'static, Result<String, UpstreamError>>;

/// A streaming completion endpoint.
///
/// Resumption is a fresh `start` over a context that ends with the model's
/// own partial output followed by injected text.
pub trait Upstream: Send + Sync {
    fn start<'a>(&'a self, context: &'a Context) -> BoxFuture<'a, Result<TokenStream, UpstreamError>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Generating,
    Injecting,
    Done,
    Failed,
}

/// Emitted while a session runs, in transcript order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    /// Model text whose tokens are final.
    Content(String),
    Interruption(InterruptionRecord),
}

/// Result of a session run. On failure the same shape holds the partial run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaved {
    pub transcript: String,
    pub segments: Vec<String>,
    pub records: Vec<InterruptionRecord>,
    pub final_context: Context,
    pub emitted_tokens: TokenCount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionFailed {
    pub partial: Interleaved,
    pub cause: UpstreamError,
}

impl fmt::Display for SessionFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} after {} tokens and {} interruptions",
            self.cause,
            self.partial.emitted_tokens,
            self.partial.records.len()
        )
    }
}

impl std::error::Error for SessionFailed {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.cause)
    }
}

pub struct GenerationSession<'p> {
    base_context: Context,
    working: Context,
    policy: &'p InterruptionPolicy,
    emitted_segments: Vec<String>,
    records: Vec<InterruptionRecord>,
    tokens_since_injection: TokenCount,
    emitted_total: TokenCount,
    next_id: u64,
    state: SessionState,
}

impl<'p> GenerationSession<'p> {
    /// Record ids count up from `first_id`.
    pub fn new(context: Context, policy: &'p InterruptionPolicy, first_id: u64) -> Result<Self> {
        if !policy.targets().cot {
            return Err(Error::InvalidPolicy(
                "policy does not target chain-of-thought output".into(),
            ));
        }
        Ok(GenerationSession {
            working: context.clone(),
            base_context: context,
            policy,
            emitted_segments: Vec::new(),
            records: Vec::new(),
            tokens_since_injection: TokenCount::ZERO,
            emitted_total: TokenCount::ZERO,
            next_id: first_id,
            state: SessionState::Generating,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn base_context(&self) -> &Context {
        &self.base_context
    }

    pub fn emitted_segments(&self) -> &[String] {
        &self.emitted_segments
    }

    pub fn records(&self) -> &[InterruptionRecord] {
        &self.records
    }

    pub fn tokens_since_injection(&self) -> TokenCount {
        self.tokens_since_injection
    }

    fn transition(&mut self, to: SessionState) {
        use SessionState::*;
        let legal = matches!(
            (self.state, to),
            (Generating, Injecting) | (Injecting, Generating) | (Generating, Done) | (Generating, Failed)
        );
        assert!(legal, "illegal session transition {:?} -> {to:?}", self.state);
        self.state = to;
    }

    /// Runs until the upstream finishes, `max_tokens` have been emitted or
    /// the upstream fails. `sink` sees every event as it happens.
    pub async fn run(
        mut self,
        upstream: &dyn Upstream,
        max_tokens: TokenCount,
        sink: &mut (dyn FnMut(SessionEvent) + Send),
    ) -> std::result::Result<Interleaved, SessionFailed> {
        let interval = self.policy.interval();
        loop {
            let remaining = max_tokens.saturating_sub(self.emitted_total);
            if remaining.is_zero() {
                self.transition(SessionState::Done);
                break;
            }
            let cut = interval.min(remaining);
            let mut stream = match upstream.start(&self.working).await {
                Ok(stream) => stream,
                Err(cause) => return Err(self.fail(cause)),
            };
            let mut segment = SegmentBuffer::new(cut);
            let end = loop {
                match stream.next().await {
                    None => break SegmentEnd::Exhausted,
                    Some(Err(cause)) => break SegmentEnd::Failed(cause),
                    Some(Ok(chunk)) => {
                        let fresh = segment.push(&chunk);
                        if !fresh.is_empty() {
                            sink(SessionEvent::Content(fresh.to_owned()));
                        }
                        if segment.reached {
                            break SegmentEnd::Cut;
                        }
                    }
                }
            };
            drop(stream);
            match end {
                SegmentEnd::Cut => {
                    let text = segment.buf[..segment.confirmed_end].to_owned();
                    self.commit(text, cut);
                    if cut == remaining {
                        self.transition(SessionState::Done);
                        break;
                    }
                    self.inject(sink);
                }
                SegmentEnd::Exhausted => {
                    let rest = segment.unstreamed();
                    if !rest.is_empty() {
                        sink(SessionEvent::Content(rest.to_owned()));
                    }
                    let tokens = segment.finished_tokens();
                    self.commit(segment.buf, tokens);
                    self.transition(SessionState::Done);
                    break;
                }
                SegmentEnd::Failed(cause) => {
                    let rest = segment.unstreamed();
                    if !rest.is_empty() {
                        sink(SessionEvent::Content(rest.to_owned()));
                    }
                    let tokens = count_tokens(&segment.buf);
                    self.commit(segment.buf, tokens);
                    return Err(self.fail(cause));
                }
            }
        }
        Ok(self.into_outcome())
    }

    fn commit(&mut self, text: String, tokens: TokenCount) {
        self.emitted_total += tokens;
        self.tokens_since_injection = tokens;
        if text.is_empty() {
            return;
        }
        self.working.push(Message::assistant(text.clone()));
        self.emitted_segments.push(text);
    }

    fn inject(&mut self, sink: &mut (dyn FnMut(SessionEvent) + Send)) {
        self.transition(SessionState::Injecting);
        let offset = self.emitted_total;
        let id = self.next_id;
        self.next_id += 1;
        let recent = self.emitted_segments.last().map_or("", String::as_str);
        let text = select_text(
            self.policy,
            &Features {
                cumulative_tokens: offset,
                turn_index: self.emitted_segments.len(),
                recent_content: recent,
            },
        )
        .to_owned();
        self.working
            .push(interruption_message(self.policy, id, offset, &text));
        let record = InterruptionRecord {
            id,
            offset_tokens: offset,
            text,
            mode: RecordMode::Cot,
            message_index: None,
        };
        self.records.push(record.clone());
        sink(SessionEvent::Interruption(record));
        self.tokens_since_injection = TokenCount::ZERO;
        self.transition(SessionState::Generating);
    }

    fn fail(mut self, cause: UpstreamError) -> SessionFailed {
        self.transition(SessionState::Failed);
        SessionFailed {
            partial: self.into_outcome(),
            cause,
        }
    }

    fn into_outcome(self) -> Interleaved {
        Interleaved {
            transcript: self.emitted_segments.concat(),
            segments: self.emitted_segments,
            records: self.records,
            final_context: self.working,
            emitted_tokens: self.emitted_total,
        }
    }
}

enum SegmentEnd {
    Cut,
    Exhausted,
    Failed(UpstreamError),
}

/// Incremental tokenisation of one segment's text.
///
/// A token is final once a later token has started, so the last token seen
/// stays pending until more text or the end of the stream arrives.
struct SegmentBuffer {
    buf: String,
    cut: TokenCount,
    confirmed: TokenCount,
    confirmed_end: usize,
    pending_start: Option<usize>,
    streamed: usize,
    reached: bool,
}

impl SegmentBuffer {
    fn new(cut: TokenCount) -> Self {
        SegmentBuffer {
            buf: String::new(),
            cut,
            confirmed: TokenCount::ZERO,
            confirmed_end: 0,
            pending_start: None,
            streamed: 0,
            reached: false,
        }
    }

    /// Appends a chunk and returns the text newly made final.
    fn push(&mut self, chunk: &str) -> &str {
        let scan_from = self.pending_start.unwrap_or(self.buf.len());
        self.buf.push_str(chunk);
        let spans = WordPunct.token_spans(&self.buf[scan_from..]);
        self.pending_start = None;
        let mut spans = spans.iter().peekable();
        while let Some(span) = spans.next() {
            if spans.peek().is_none() {
                self.pending_start = Some(scan_from + span.start);
                break;
            }
            self.confirmed += TokenCount::new(1);
            self.confirmed_end = scan_from + span.end;
            if self.confirmed == self.cut {
                self.reached = true;
                break;
            }
        }
        let start = self.streamed;
        self.streamed = self.confirmed_end;
        &self.buf[start..self.confirmed_end]
    }

    fn unstreamed(&self) -> &str {
        &self.buf[self.streamed..]
    }

    fn finished_tokens(&self) -> TokenCount {
        self.confirmed + TokenCount::new(u64::from(self.pending_start.is_some()))
    }
}

/// Runs a session without observing events.
pub async fn run_interleaved(
    context: Context,
    policy: &InterruptionPolicy,
    upstream: &dyn Upstream,
    max_tokens: TokenCount,
) -> std::result::Result<Interleaved, SessionFailed> {
    run_interleaved_with(context, policy, upstream, max_tokens, 1, &mut |_| {}).await
}

/// Runs a session, reporting events to `sink`. Errors in the session set-up
/// (a policy that does not target chain-of-thought) are reported as a
/// failure with an empty partial run.
pub async fn run_interleaved_with(
    context: Context,
    policy: &InterruptionPolicy,
    upstream: &dyn Upstream,
    max_tokens: TokenCount,
    first_id: u64,
    sink: &mut (dyn FnMut(SessionEvent) + Send),
) -> std::result::Result<Interleaved, SessionFailed> {
    let base = context.clone();
    match GenerationSession::new(context, policy, first_id) {
        Ok(session) => session.run(upstream, max_tokens, sink).await,
        Err(err) => Err(SessionFailed {
            partial: Interleaved {
                transcript: String::new(),
                segments: Vec::new(),
                records: Vec::new(),
                final_context: base,
                emitted_tokens: TokenCount::ZERO,
            },
            cause: UpstreamError::new(err.to_string()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{Provenance, Role};
    use crate::engine::Targets;
    use crate::mock::DeterministicMock;
    use futures::executor::block_on;

    fn policy(interval: u64) -> InterruptionPolicy {
        InterruptionPolicy::builder()
            .interval(interval)
            .default_text("check your reasoning against the rules")
            .build()
            .unwrap()
    }

    fn prompt() -> Context {
        Context::new(vec![Message::system("be safe"), Message::user("solve it")]).unwrap()
    }

    #[allow(clippy::result_large_err)]
    fn run(mock: &DeterministicMock, interval: u64, max: u64) -> std::result::Result<Interleaved, SessionFailed> {
        block_on(run_interleaved(
            prompt(),
            &policy(interval),
            mock,
            TokenCount::new(max),
        ))
    }

    #[test]
    fn zero_tokens() {
        let out = run(&DeterministicMock::new(1, 0), 1000, 10_000).unwrap();
        assert_eq!(out.transcript, "");
        assert!(out.records.is_empty());
        assert_eq!(out.final_context, prompt());
    }

    #[test]
    fn twenty_five_hundred_by_thousand() {
        let mock = DeterministicMock::new(7, 2500);
        let out = run(&mock, 1000, 100_000).unwrap();
        assert_eq!(
            out.records.iter().map(|r| r.offset_tokens.get()).collect::<Vec<_>>(),
            vec![1000, 2000]
        );
        let lens: Vec<u64> = out.segments.iter().map(|s| count_tokens(s).get()).collect();
        assert_eq!(lens, vec![1000, 1000, 500]);
        assert_eq!(out.transcript, mock.expected_text(0, 2500));
        let roles: Vec<Role> = out.final_context.messages()[2..].iter().map(|m| m.role()).collect();
        assert_eq!(
            roles,
            vec![Role::Assistant, Role::Interruption, Role::Assistant, Role::Interruption, Role::Assistant]
        );
    }

    #[test]
    fn budget_below_interval() {
        let out = run(&DeterministicMock::new(3, 5000), 1000, 500).unwrap();
        assert_eq!(out.segments.len(), 1);
        assert_eq!(count_tokens(&out.transcript), TokenCount::new(500));
        assert!(out.records.is_empty());
    }

    #[test]
    fn budget_at_interval_multiple_does_not_inject_at_end() {
        let out = run(&DeterministicMock::new(3, 5000), 100, 300).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.emitted_tokens, TokenCount::new(300));
    }

    #[test]
    fn refusal_preserves_partial_run() {
        let mock = DeterministicMock::new(9, 100).refuse_after(3);
        let err = run(&mock, 1000, 1000).unwrap_err();
        assert_eq!(count_tokens(&err.partial.transcript), TokenCount::new(3));
        assert!(err.partial.records.is_empty());

        let mock = DeterministicMock::new(9, 100).refuse_after(25);
        let err = run(&mock, 10, 1000).unwrap_err();
        assert_eq!(err.partial.emitted_tokens, TokenCount::new(25));
        assert_eq!(
            err.partial.records.iter().map(|r| r.offset_tokens.get()).collect::<Vec<_>>(),
            vec![10, 20]
        );
        assert_eq!(err.partial.transcript, mock.expected_text(0, 25));
    }

    #[test]
    fn events_reproduce_transcript() {
        let mock = DeterministicMock::new(5, 95).chunk_bytes(3);
        let mut events = Vec::new();
        let out = block_on(run_interleaved_with(
            prompt(),
            &policy(20),
            &mock,
            TokenCount::new(1000),
            1,
            &mut |e| events.push(e),
        ))
        .unwrap();
        let content: String = events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Content(c) => Some(c.as_str()),
                SessionEvent::Interruption(_) => None,
            })
            .collect();
        assert_eq!(content, out.transcript);
        assert_eq!(out.transcript, mock.expected_text(0, 95));
        let interruptions = events
            .iter()
            .filter(|e| matches!(e, SessionEvent::Interruption(_)))
            .count();
        assert_eq!(interruptions, 4);
    }

    #[test]
    fn injected_messages_are_sentinel_wrapped() {
        let out = run(&DeterministicMock::new(2, 30), 10, 1000).unwrap();
        for m in out.final_context.messages() {
            if m.role() == Role::Interruption {
                assert_eq!(m.provenance(), Provenance::Injected);
                assert!(m.content().starts_with("[[RIC-INT id="));
                assert!(m.content().ends_with("[[/RIC-INT]]"));
            }
        }
    }

    #[test]
    fn requires_cot_target() {
        let p = InterruptionPolicy::builder()
            .targets(Targets { user_input: true, cot: false })
            .build()
            .unwrap();
        assert!(GenerationSession::new(prompt(), &p, 1).is_err());
    }

    #[test]
    fn session_starts_generating() {
        let p = policy(10);
        let s = GenerationSession::new(prompt(), &p, 1).unwrap();
        assert_eq!(s.state(), SessionState::Generating);
        assert_eq!(s.tokens_since_injection(), TokenCount::ZERO);
        assert!(s.emitted_segments().is_empty() && s.records().is_empty());
    }
}
