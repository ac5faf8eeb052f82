//! Deterministic in-process upstream for tests and simulations.

use futures::future::{self, BoxFuture};
use futures::stream::{self, StreamExt};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::context::{Context, Role};
use crate::cot::{TokenStream, Upstream, UpstreamError};
use crate::tokens::TokenCount;

const VOCAB: [&str; 32] = [
    "the", "model", "considers", "step", "therefore", "next", "value", "check", "rule", "plan",
    "result", "if", "then", "sum", "of", "42", "x", "y", "output", "reason", "goal", "safe",
    "answer", "first", "second", "so", "we", "get", ",", ".", ":", "=",
];

/// Emits a seeded pseudo-random word stream of exactly `total` tokens.
///
/// The stream position is recovered from the context on every `start`: it is
/// the token count of the assistant messages after the last user message. A
/// resumed generation therefore continues the sequence where the
/// interleaver's committed output ends, whatever text was injected.
#[derive(Debug, Clone)]
pub struct DeterministicMock {
    seed: u64,
    total: u64,
    refuse_after: Option<u64>,
    chunk_bytes: Option<usize>,
}

impl DeterministicMock {
    pub fn new(seed: u64, total: impl Into<TokenCount>) -> Self {
        DeterministicMock {
            seed,
            total: total.into().get(),
            refuse_after: None,
            chunk_bytes: None,
        }
    }

    /// Fails the stream once `n` tokens of the sequence have been emitted.
    pub fn refuse_after(mut self, n: u64) -> Self {
        self.refuse_after = Some(n);
        self
    }

    /// Regroups output into chunks of `n` bytes, splitting inside words.
    pub fn chunk_bytes(mut self, n: usize) -> Self {
        self.chunk_bytes = Some(n.max(1));
        self
    }

    pub fn total(&self) -> TokenCount {
        TokenCount::new(self.total)
    }

    /// Token `i` of the sequence with its leading separator.
    fn token_texts(&self, from: u64, to: u64) -> impl Iterator<Item = String> + Send + 'static {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(u128::from(from));
        (from..to).map(move |i| {
            let word = VOCAB[(rng.next_u32() as usize) % VOCAB.len()];
            if i == 0 {
                word.to_owned()
            } else {
                format!(" {word}")
            }
        })
    }

    /// The exact text of tokens `from..to`.
    pub fn expected_text(&self, from: u64, to: u64) -> String {
        self.token_texts(from, to.min(self.total)).collect()
    }

    /// Resume position implied by `context`.
    pub fn position(context: &Context) -> u64 {
        let messages = context.messages();
        let after_user = messages
            .iter()
            .rposition(|m| m.role() == Role::User)
            .map_or(0, |i| i + 1);
        messages[after_user..]
            .iter()
            .filter(|m| m.role() == Role::Assistant)
            .map(|m| m.token_len().get())
            .sum()
    }

    /// The stream `start` would return for `context`, without the future.
    pub fn stream_for(&self, context: &Context) -> TokenStream {
        let from = Self::position(context).min(self.total);
        let limit = self.refuse_after.map_or(self.total, |n| n.min(self.total));
        let to = limit.max(from);
        let refuse = self.refuse_after.is_some_and(|n| n < self.total);
        let words = self.token_texts(from, to).map(Ok);
        let failure = refuse.then(|| {
            Err(UpstreamError::new(format!(
                "mock upstream refused after {} tokens",
                limit
            )))
        });
        let items = words.chain(failure);
        match self.chunk_bytes {
            None => stream::iter(items).boxed(),
            Some(n) => stream::iter(rechunk(items, n)).boxed(),
        }
    }
}

fn rechunk(
    items: impl Iterator<Item = Result<String, UpstreamError>>,
    n: usize,
) -> Vec<Result<String, UpstreamError>> {
    let mut out = Vec::new();
    let mut pending = String::new();
    for item in items {
        match item {
            Ok(text) => {
                pending.push_str(&text);
                while pending.len() >= n {
                    let mut cut = n;
                    while !pending.is_char_boundary(cut) {
                        cut += 1;
                    }
                    out.push(Ok(pending[..cut].to_owned()));
                    pending.drain(..cut);
                }
            }
            Err(err) => {
                if !pending.is_empty() {
                    out.push(Ok(std::mem::take(&mut pending)));
                }
                out.push(Err(err));
                return out;
            }
        }
    }
    if !pending.is_empty() {
        out.push(Ok(pending));
    }
    out
}

impl Upstream for DeterministicMock {
    fn start<'a>(&'a self, context: &'a Context) -> BoxFuture<'a, Result<TokenStream, UpstreamError>> {
        Box::pin(future::ready(Ok(self.stream_for(context))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Message;
    use crate::tokens::count_tokens;
    use futures::executor::block_on_stream;

    fn collect(stream: TokenStream) -> (String, Option<UpstreamError>) {
        let mut text = String::new();
        for item in block_on_stream(stream) {
            match item {
                Ok(t) => text.push_str(&t),
                Err(e) => return (text, Some(e)),
            }
        }
        (text, None)
    }

    fn base() -> Context {
        Context::new(vec![Message::user("go")]).unwrap()
    }

    #[test]
    fn same_seed_same_stream() {
        let a = collect(DeterministicMock::new(7, 10).stream_for(&base())).0;
        let b = collect(DeterministicMock::new(7, 10).stream_for(&base())).0;
        assert_eq!(a, b);
        assert_eq!(count_tokens(&a), TokenCount::new(10));
        let c = collect(DeterministicMock::new(8, 10).stream_for(&base())).0;
        assert_ne!(a, c);
    }

    #[test]
    fn resumes_after_own_output() {
        let mock = DeterministicMock::new(7, 10);
        let full = mock.expected_text(0, 10);
        let first_four = mock.expected_text(0, 4);
        assert!(full.starts_with(&first_four));
        let ctx = base()
            .with_message(Message::assistant(first_four.clone()))
            .unwrap();
        let rest = collect(mock.stream_for(&ctx)).0;
        assert_eq!(format!("{first_four}{rest}"), full);
        assert_eq!(count_tokens(&rest), TokenCount::new(6));
    }

    #[test]
    fn refuse_after_three() {
        let (text, err) = collect(DeterministicMock::new(1, 10).refuse_after(3).stream_for(&base()));
        assert_eq!(count_tokens(&text), TokenCount::new(3));
        assert!(err.is_some());
        let (_, err) = collect(DeterministicMock::new(1, 10).refuse_after(10).stream_for(&base()));
        assert!(err.is_none());
    }

    #[test]
    fn chunking_preserves_text() {
        let mock = DeterministicMock::new(4, 50);
        let plain = collect(mock.stream_for(&base())).0;
        let chunked = collect(mock.clone().chunk_bytes(5).stream_for(&base())).0;
        assert_eq!(plain, chunked);
    }
}
