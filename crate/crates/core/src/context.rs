//! Conversation model: system prompt, turns and injected interruptions.
//!
//! Message content is stored as parts. External text parts are the bytes a
//! client supplied. Injected parts carry interruption text together with the
//! sentinel markers that frame it on the wire. Token accounting counts the
//! text of every part and treats the markers as framing: they are rendered
//! into [`Message::content`] but are not tokens of the conversation.

use std::borrow::Cow;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ratio::{self, Rational};
use crate::scaling::{self, RatioParams};
use crate::tokens::{count_tokens, TokenCount};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SystemPrompt,
    User,
    Assistant,
    Interruption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    External,
    Injected,
}

/// Interruption text framed by rendered sentinel markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectedBlock {
    open: String,
    text: String,
    close: String,
    token_len: TokenCount,
}

impl InjectedBlock {
    pub(crate) fn new(open: String, text: String, close: String) -> Self {
        let token_len = count_tokens(&text);
        InjectedBlock {
            open,
            text,
            close,
            token_len,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn open_marker(&self) -> &str {
        &self.open
    }

    pub fn close_marker(&self) -> &str {
        &self.close
    }

    pub fn token_len(&self) -> TokenCount {
        self.token_len
    }

    fn render_into(&self, out: &mut String) {
        out.push_str(&self.open);
        out.push_str(&self.text);
        out.push_str(&self.close);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Injected(InjectedBlock),
}

impl Part {
    fn token_len(&self) -> TokenCount {
        match self {
            Part::Text(text) => count_tokens(text),
            Part::Injected(block) => block.token_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    role: Role,
    provenance: Provenance,
    parts: Vec<Part>,
    token_len: TokenCount,
    injected_len: TokenCount,
}

impl Message {
    /// Builds a message from external input. The interruption role is
    /// reserved for the library and is refused here.
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self> {
        if role == Role::Interruption {
            return Err(Error::SpoofedInterruption);
        }
        Ok(Self::from_parts(
            role,
            Provenance::External,
            vec![Part::Text(content.into())],
        ))
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::external(Role::SystemPrompt, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::external(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::external(Role::Assistant, content)
    }

    fn external(role: Role, content: impl Into<String>) -> Self {
        Self::from_parts(role, Provenance::External, vec![Part::Text(content.into())])
    }

    pub(crate) fn interruption(block: InjectedBlock) -> Self {
        Self::from_parts(
            Role::Interruption,
            Provenance::Injected,
            vec![Part::Injected(block)],
        )
    }

    pub(crate) fn from_parts(role: Role, provenance: Provenance, parts: Vec<Part>) -> Self {
        debug_assert!(role != Role::Interruption || provenance == Provenance::Injected);
        let mut token_len = TokenCount::ZERO;
        let mut injected_len = TokenCount::ZERO;
        for part in &parts {
            let n = part.token_len();
            token_len += n;
            if matches!(part, Part::Injected(_)) || provenance == Provenance::Injected {
                injected_len += n;
            }
        }
        Message {
            role,
            provenance,
            parts,
            token_len,
            injected_len,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// Tokens of every part, markers excluded.
    pub fn token_len(&self) -> TokenCount {
        self.token_len
    }

    /// Tokens that were injected rather than supplied externally.
    pub fn injected_tokens(&self) -> TokenCount {
        self.injected_len
    }

    pub fn has_injections(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Injected(_)))
    }

    /// Wire content: text parts verbatim, injected parts wrapped in markers.
    pub fn content(&self) -> Cow<'_, str> {
        match self.parts.as_slice() {
            [Part::Text(text)] => Cow::Borrowed(text),
            parts => {
                let mut out = String::new();
                for part in parts {
                    match part {
                        Part::Text(text) => out.push_str(text),
                        Part::Injected(block) => block.render_into(&mut out),
                    }
                }
                Cow::Owned(out)
            }
        }
    }

    /// External text only, i.e. the content with every injection removed.
    pub fn external_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(text) => Some(text.as_str()),
                Part::Injected(_) => None,
            })
            .collect()
    }

    /// Interruption text of every injected block in this message.
    pub fn injected_blocks(&self) -> impl Iterator<Item = &InjectedBlock> {
        self.parts.iter().filter_map(|p| match p {
            Part::Injected(block) => Some(block),
            Part::Text(_) => None,
        })
    }
}

/// An ordered conversation. At most one system prompt, and only in first
/// position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Context {
    messages: Vec<Message>,
}

impl Context {
    pub fn new(messages: Vec<Message>) -> Result<Self> {
        if let Some(pos) = messages
            .iter()
            .skip(1)
            .position(|m| m.role == Role::SystemPrompt)
        {
            return Err(Error::InvalidContext(format!(
                "system prompt at position {} (only position 0 is allowed)",
                pos + 1
            )));
        }
        Ok(Context { messages })
    }

    pub fn empty() -> Self {
        Context::default()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn into_messages(self) -> Vec<Message> {
        self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn system_prompt(&self) -> Option<&Message> {
        self.messages
            .first()
            .filter(|m| m.role == Role::SystemPrompt)
    }

    /// Appends a message, returning the extended context.
    pub fn with_message(mut self, message: Message) -> Result<Self> {
        if message.role == Role::SystemPrompt && !self.messages.is_empty() {
            return Err(Error::InvalidContext(
                "system prompt must be the first message".into(),
            ));
        }
        self.messages.push(message);
        Ok(self)
    }

    pub(crate) fn push(&mut self, message: Message) {
        debug_assert!(message.role != Role::SystemPrompt || self.messages.is_empty());
        self.messages.push(message);
    }

    pub fn total_length(&self) -> TokenCount {
        self.messages.iter().map(Message::token_len).sum()
    }

    pub fn system_prompt_tokens(&self) -> TokenCount {
        self.system_prompt().map_or(TokenCount::ZERO, Message::token_len)
    }

    pub fn injected_tokens(&self) -> TokenCount {
        self.messages.iter().map(Message::injected_tokens).sum()
    }

    /// Non-injected tokens outside the system prompt: the conversation length
    /// across which interruptions are scheduled.
    pub fn conversation_tokens(&self) -> TokenCount {
        self.messages
            .iter()
            .filter(|m| m.role != Role::SystemPrompt)
            .map(|m| m.token_len - m.injected_len)
            .sum()
    }

    pub fn interruption_count(&self) -> usize {
        self.messages
            .iter()
            .map(|m| match m.provenance {
                Provenance::Injected => 1,
                Provenance::External => m.injected_blocks().count(),
            })
            .sum()
    }
}

/// Measured and analytic system-share figures for one context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatioReport {
    /// System prompt plus every injected token.
    pub s_tokens: TokenCount,
    /// Every token in the context.
    pub l_tokens: TokenCount,
    pub measured_ratio: Rational,
    /// Closed-form `s_p/l + s_i/t`, with `l` the conversation length. Absent
    /// when no policy parameters are supplied or the conversation is empty.
    pub analytic_ratio: Option<Rational>,
    /// `s_i/t`: the infimum of the analytic ratio over all lengths.
    pub bound_q: Option<Rational>,
    /// `s_i/(t+s_i)`: the limit of the measured ratio.
    pub measured_asymptote: Option<Rational>,
}

/// Measured share of system-controlled tokens in `context`.
pub fn system_share(context: &Context) -> Result<RatioReport> {
    let l_tokens = context.total_length();
    if l_tokens.is_zero() {
        return Err(Error::UndefinedRatio);
    }
    let s_tokens = context.system_prompt_tokens() + context.injected_tokens();
    Ok(RatioReport {
        s_tokens,
        l_tokens,
        measured_ratio: ratio::ratio(s_tokens.get(), l_tokens.get()),
        analytic_ratio: None,
        bound_q: None,
        measured_asymptote: None,
    })
}

/// [`system_share`] plus the closed-form figures for the given interval and
/// interruption length. The system prompt length is taken from the context.
pub fn system_share_with(
    context: &Context,
    interval: TokenCount,
    interruption_len: TokenCount,
) -> Result<RatioReport> {
    let mut report = system_share(context)?;
    let params = RatioParams::new(context.system_prompt_tokens(), interruption_len, interval)?;
    let l = context.conversation_tokens();
    report.analytic_ratio = scaling::analytic_ratio(&params, l).ok();
    report.bound_q = Some(scaling::asymptotic_ratio(&params));
    report.measured_asymptote = Some(scaling::measured_asymptote(&params));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::filler_text;
    use proptest::prelude::*;

    fn n_tokens(n: u64) -> String {
        filler_text(n)
    }

    #[test]
    fn total_length_examples() {
        assert_eq!(Context::empty().total_length(), TokenCount::ZERO);
        let ctx = Context::new(vec![Message::system("be safe"), Message::user("hello world")])
            .unwrap();
        assert_eq!(ctx.total_length(), TokenCount::new(4));
        let ctx = Context::new(vec![
            Message::user(n_tokens(10)),
            Message::assistant(n_tokens(20)),
            Message::user(n_tokens(30)),
        ])
        .unwrap();
        assert_eq!(ctx.total_length(), TokenCount::new(60));
    }

    #[test]
    fn system_share_examples() {
        let ctx =
            Context::new(vec![Message::system(n_tokens(10)), Message::user(n_tokens(90))]).unwrap();
        assert_eq!(system_share(&ctx).unwrap().measured_ratio, ratio::ratio(1, 10));

        let ctx = Context::new(vec![Message::system(n_tokens(7))]).unwrap();
        assert_eq!(system_share(&ctx).unwrap().measured_ratio, ratio::int(1));

        assert_eq!(system_share(&Context::empty()), Err(Error::UndefinedRatio));
    }

    #[test]
    fn system_share_with_nine_injected_interruptions() {
        let mut messages = vec![Message::system(n_tokens(200))];
        for i in 0..10 {
            messages.push(Message::user(n_tokens(980)));
            if i < 9 {
                messages.push(Message::interruption(InjectedBlock::new(
                    "<<".into(),
                    n_tokens(50),
                    ">>".into(),
                )));
            }
        }
        let ctx = Context::new(messages).unwrap();
        let report = system_share(&ctx).unwrap();
        assert_eq!(report.s_tokens, TokenCount::new(650));
        assert_eq!(report.l_tokens, TokenCount::new(10450));
        assert_eq!(report.measured_ratio, ratio::ratio(650, 10450));
        assert!((ratio::to_f64(&report.measured_ratio) - 0.0622).abs() < 1e-4);
    }

    #[test]
    fn interruption_role_is_not_accepted_externally() {
        assert_eq!(
            Message::new(Role::Interruption, "x"),
            Err(Error::SpoofedInterruption)
        );
        let m = Message::new(Role::User, "x").unwrap();
        assert_eq!(m.provenance(), Provenance::External);
    }

    #[test]
    fn system_prompt_must_be_first() {
        assert!(Context::new(vec![Message::user("a"), Message::system("b")]).is_err());
        assert!(Context::new(vec![Message::system("a"), Message::system("b")]).is_err());
        assert!(Context::empty()
            .with_message(Message::user("a"))
            .unwrap()
            .with_message(Message::system("b"))
            .is_err());
    }

    #[test]
    fn rendered_content_wraps_blocks() {
        let m = Message::from_parts(
            Role::User,
            Provenance::External,
            vec![
                Part::Text("a b".into()),
                Part::Injected(InjectedBlock::new("[".into(), "r".into(), "]".into())),
                Part::Text(" c".into()),
            ],
        );
        assert_eq!(m.content(), "a b[r] c");
        assert_eq!(m.external_text(), "a b c");
        assert_eq!(m.token_len(), TokenCount::new(4));
        assert_eq!(m.injected_tokens(), TokenCount::new(1));
    }

    #[test]
    fn system_share_with_fills_analytic_columns() {
        let ctx = Context::new(vec![
            Message::system(n_tokens(200)),
            Message::user(n_tokens(10000)),
        ])
        .unwrap();
        let report = system_share_with(&ctx, TokenCount::new(1000), TokenCount::new(50)).unwrap();
        assert_eq!(report.analytic_ratio, Some(ratio::ratio(7, 100)));
        assert_eq!(report.bound_q, Some(ratio::ratio(1, 20)));
        assert_eq!(report.measured_asymptote, Some(ratio::ratio(50, 1050)));
    }

    proptest! {
        #[test]
        fn injecting_never_lowers_the_ratio(s in 0u64..500, extra in 1u64..500, m in 1u64..500) {
            let l = s + extra;
            let before = ratio::ratio(s, l);
            let after = ratio::ratio(s + m, l + m);
            prop_assert!(after >= before);
        }

        #[test]
        fn total_length_ignores_order(lens in proptest::collection::vec(0u64..40, 0..8)) {
            let messages: Vec<Message> = lens.iter().map(|&n| Message::user(n_tokens(n))).collect();
            let mut reversed = messages.clone();
            reversed.reverse();
            let a = Context::new(messages).unwrap().total_length();
            let b = Context::new(reversed).unwrap().total_length();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.get(), lens.iter().sum::<u64>());
        }
    }
}
