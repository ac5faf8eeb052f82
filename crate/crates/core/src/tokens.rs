//! Token counting and interval segmentation.
//!
//! Every length in the library (context length, system prompt length,
//! interruption length, interval) is measured in tokens produced by a
//! [`Tokenizer`]. The default [`WordPunct`] rule is deterministic and needs
//! no vocabulary: a token is a maximal run of alphanumeric characters or a
//! single character that is neither alphanumeric nor whitespace.

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Range, Sub, SubAssign};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A non-negative number of tokens.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenCount(u64);

impl TokenCount {
    pub const ZERO: TokenCount = TokenCount(0);

    pub const fn new(value: u64) -> Self {
        TokenCount(value)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_sub(self, rhs: TokenCount) -> Option<TokenCount> {
        self.0.checked_sub(rhs.0).map(TokenCount)
    }

    pub fn saturating_sub(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0.saturating_sub(rhs.0))
    }
}

impl From<u64> for TokenCount {
    fn from(value: u64) -> Self {
        TokenCount(value)
    }
}

impl From<TokenCount> for u64 {
    fn from(value: TokenCount) -> Self {
        value.0
    }
}

impl fmt::Display for TokenCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Add for TokenCount {
    type Output = TokenCount;
    fn add(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0 + rhs.0)
    }
}

impl AddAssign for TokenCount {
    fn add_assign(&mut self, rhs: TokenCount) {
        self.0 += rhs.0;
    }
}

impl Sub for TokenCount {
    type Output = TokenCount;
    fn sub(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0 - rhs.0)
    }
}

impl SubAssign for TokenCount {
    fn sub_assign(&mut self, rhs: TokenCount) {
        self.0 -= rhs.0;
    }
}

impl Mul<u64> for TokenCount {
    type Output = TokenCount;
    fn mul(self, rhs: u64) -> TokenCount {
        TokenCount(self.0 * rhs)
    }
}

impl Sum for TokenCount {
    fn sum<I: Iterator<Item = TokenCount>>(iter: I) -> TokenCount {
        TokenCount(iter.map(|c| c.0).sum())
    }
}

impl<'a> Sum<&'a TokenCount> for TokenCount {
    fn sum<I: Iterator<Item = &'a TokenCount>>(iter: I) -> TokenCount {
        iter.copied().sum()
    }
}

/// A token counter.
///
/// Implementations must be deterministic. The interval splitter and the
/// chain-of-thought interleaver rely on spans being local: the spans found
/// when scanning from the start of some token must agree with the spans
/// found when scanning the whole text.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Byte ranges of every token in `text`, in order and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> TokenCount {
        TokenCount(self.token_spans(text).len() as u64)
    }
}

/// The default rule: alphanumeric runs and single punctuation characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPunct;

impl Tokenizer for WordPunct {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut run_start: Option<usize> = None;
        for (idx, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                run_start.get_or_insert(idx);
                continue;
            }
            if let Some(start) = run_start.take() {
                spans.push(start..idx);
            }
            if !ch.is_whitespace() {
                spans.push(idx..idx + ch.len_utf8());
            }
        }
        if let Some(start) = run_start {
            spans.push(start..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> TokenCount {
        let mut n = 0u64;
        let mut in_run = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_run {
                    n += 1;
                    in_run = true;
                }
            } else {
                in_run = false;
                if !ch.is_whitespace() {
                    n += 1;
                }
            }
        }
        TokenCount(n)
    }
}

/// Named tokenizers. The default rule is always registered as `word-punct`.
#[derive(Clone)]
pub struct TokenizerRegistry {
    counters: HashMap<String, Arc<dyn Tokenizer>>,
}

impl TokenizerRegistry {
    pub fn new() -> Self {
        let mut counters: HashMap<String, Arc<dyn Tokenizer>> = HashMap::new();
        counters.insert(WordPunct.name().to_owned(), Arc::new(WordPunct));
        TokenizerRegistry { counters }
    }

    /// Registers `tokenizer` under its own name, replacing any previous entry.
    pub fn register(&mut self, tokenizer: Arc<dyn Tokenizer>) {
        self.counters.insert(tokenizer.name().to_owned(), tokenizer);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Tokenizer>> {
        self.counters.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.counters.keys().map(String::as_str)
    }
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for TokenizerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.names().collect();
        names.sort_unstable();
        f.debug_struct("TokenizerRegistry").field("counters", &names).finish()
    }
}

/// Counts tokens with the default rule.
pub fn count_tokens(text: &str) -> TokenCount {
    WordPunct.count(text)
}

/// Counts tokens in raw bytes, rejecting invalid UTF-8.
pub fn count_tokens_bytes(bytes: &[u8]) -> Result<TokenCount> {
    Ok(count_tokens(std::str::from_utf8(bytes)?))
}

/// One piece of a split text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub start_token: TokenCount,
    pub token_len: TokenCount,
}

/// Splits `text` after every `interval`-th token using the default rule.
pub fn split_at_intervals(text: &str, interval: TokenCount) -> Result<Vec<Segment>> {
    split_at_intervals_with(&WordPunct, text, interval)
}

/// Splits `text` so that every segment but the last holds exactly `interval`
/// tokens.
///
/// A cut falls immediately after the last byte of the closing token, so any
/// whitespace between two tokens belongs to the later segment. Text with no
/// tokens at all yields a single zero-token segment (or nothing, when empty).
pub fn split_at_intervals_with(
    tokenizer: &dyn Tokenizer,
    text: &str,
    interval: TokenCount,
) -> Result<Vec<Segment>> {
    if interval.is_zero() {
        return Err(Error::InvalidPolicy("interval must be at least 1 token".into()));
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let spans = tokenizer.token_spans(text);
    let step = interval.get() as usize;
    let mut segments = Vec::with_capacity(spans.len() / step + 1);
    let mut byte_start = 0;
    let mut token_start = 0usize;
    while spans.len() - token_start > step {
        let cut = spans[token_start + step - 1].end;
        segments.push(Segment {
            text: text[byte_start..cut].to_owned(),
            start_token: TokenCount(token_start as u64),
            token_len: interval,
        });
        byte_start = cut;
        token_start += step;
    }
    segments.push(Segment {
        text: text[byte_start..].to_owned(),
        start_token: TokenCount(token_start as u64),
        token_len: TokenCount((spans.len() - token_start) as u64),
    });
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(segments: &[Segment]) -> Vec<&str> {
        segments.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn counts_by_hand() {
        assert_eq!(count_tokens(""), TokenCount(0));
        assert_eq!(count_tokens("hello world"), TokenCount(2));
        assert_eq!(count_tokens("a,b c"), TokenCount(4));
        assert_eq!(count_tokens("   \n\t"), TokenCount(0));
        assert_eq!(count_tokens("[[RIC-INT id=1]]"), TokenCount(10));
        assert_eq!(count_tokens("héllo wörld 42"), TokenCount(3));
    }

    #[test]
    fn rejects_invalid_utf8() {
        assert!(matches!(
            count_tokens_bytes(&[0x61, 0xff, 0x62]),
            Err(Error::Encoding(_))
        ));
        assert_eq!(count_tokens_bytes(b"a b").unwrap(), TokenCount(2));
    }

    #[test]
    fn spans_match_fast_count() {
        let text = "x = f(a,b);  // ok\nnext";
        assert_eq!(
            WordPunct.token_spans(text).len() as u64,
            WordPunct.count(text).get()
        );
    }

    #[test]
    fn split_examples() {
        assert!(split_at_intervals("", TokenCount(5)).unwrap().is_empty());
        let segs = split_at_intervals("a b c d e", TokenCount(2)).unwrap();
        assert_eq!(texts(&segs), vec!["a b", " c d", " e"]);
        assert_eq!(
            segs.iter().map(|s| s.start_token.get()).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn split_2500_by_1000() {
        let text = (0..2500).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let segs = split_at_intervals(&text, TokenCount(1000)).unwrap();
        let lens: Vec<u64> = segs.iter().map(|s| count_tokens(&s.text).get()).collect();
        assert_eq!(lens, vec![1000, 1000, 500]);
        assert_eq!(
            segs.iter().map(|s| s.token_len.get()).collect::<Vec<_>>(),
            lens
        );
    }

    #[test]
    fn split_rejects_zero_interval() {
        assert!(matches!(
            split_at_intervals("a", TokenCount(0)),
            Err(Error::InvalidPolicy(_))
        ));
    }

    #[test]
    fn whitespace_only_text_is_one_empty_segment() {
        let segs = split_at_intervals("  \n ", TokenCount(3)).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].token_len, TokenCount(0));
        assert_eq!(segs[0].text, "  \n ");
    }

    #[test]
    fn exact_multiple_has_no_empty_tail() {
        let segs = split_at_intervals("a b c d ", TokenCount(2)).unwrap();
        assert_eq!(texts(&segs), vec!["a b", " c d "]);
    }

    #[test]
    fn registry_has_default() {
        let mut reg = TokenizerRegistry::new();
        assert_eq!(reg.get("word-punct").unwrap().count("a b"), TokenCount(2));

        struct Bytes;
        impl Tokenizer for Bytes {
            fn name(&self) -> &str {
                "bytes"
            }
            fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
                (0..text.len()).map(|i| i..i + 1).collect()
            }
        }
        reg.register(Arc::new(Bytes));
        assert_eq!(reg.get("bytes").unwrap().count("abc"), TokenCount(3));
    }

    proptest! {
        #[test]
        fn split_is_lossless_and_additive(text in "[a-z0-9 ,.!\n\u{e9}]{0,200}", interval in 1u64..12) {
            let segs = split_at_intervals(&text, TokenCount(interval)).unwrap();
            let joined: String = segs.iter().map(|s| s.text.as_str()).collect();
            prop_assert_eq!(&joined, &text);
            let total: TokenCount = segs.iter().map(|s| s.token_len).sum();
            prop_assert_eq!(total, count_tokens(&text));
            if let Some((_, init)) = segs.split_last() {
                for s in init {
                    prop_assert_eq!(s.token_len, TokenCount(interval));
                    prop_assert_eq!(count_tokens(&s.text), TokenCount(interval));
                }
            }
            prop_assert_eq!(segs.clone(), split_at_intervals(&text, TokenCount(interval)).unwrap());
        }

        #[test]
        fn whitespace_joint_is_additive(a in "[a-z,.]{0,30}", b in "[a-z,.]{0,30}") {
            let joined = format!("{a} {b}");
            prop_assert_eq!(count_tokens(&joined), count_tokens(&a) + count_tokens(&b));
        }
    }
}
