//! Sentinel marker templates.
//!
//! An open marker template may contain the placeholders `{n}` (record id) and
//! `{t}` (offset in tokens). A template must begin with literal text; that
//! literal prefix is what collision checks and the stripper search for.

use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_OPEN: &str = "[[RIC-INT id={n} off={t}]]";
pub const DEFAULT_CLOSE: &str = "[[/RIC-INT]]";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Id,
    Offset,
}

#[derive(Clone, PartialEq, Eq)]
pub struct OpenTemplate {
    source: String,
    pieces: Vec<Piece>,
}

impl OpenTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while !rest.is_empty() {
            let placeholder = if rest.starts_with("{n}") {
                Some(Piece::Id)
            } else if rest.starts_with("{t}") {
                Some(Piece::Offset)
            } else {
                None
            };
            match placeholder {
                Some(piece) => {
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                    } else if pieces.last().is_some_and(|p| !matches!(p, Piece::Literal(_))) {
                        return Err(Error::InvalidPolicy(
                            "adjacent placeholders in open sentinel are ambiguous".into(),
                        ));
                    }
                    pieces.push(piece);
                    rest = &rest[3..];
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty");
                    literal.push(ch);
                    rest = &rest[ch.len_utf8()..];
                }
            }
        }
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        match pieces.first() {
            Some(Piece::Literal(_)) => {}
            _ => {
                return Err(Error::InvalidPolicy(
                    "open sentinel must start with literal text".into(),
                ))
            }
        }
        Ok(OpenTemplate {
            source: source.to_owned(),
            pieces,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// The literal text every rendered marker starts with.
    pub fn prefix(&self) -> &str {
        match &self.pieces[0] {
            Piece::Literal(lit) => lit,
            _ => unreachable!("validated at parse time"),
        }
    }

    pub fn render(&self, id: u64, offset: u64) -> String {
        let mut out = String::with_capacity(self.source.len() + 8);
        for piece in &self.pieces {
            match piece {
                Piece::Literal(lit) => out.push_str(lit),
                Piece::Id => out.push_str(&id.to_string()),
                Piece::Offset => out.push_str(&offset.to_string()),
            }
        }
        out
    }

    /// Matches a rendered marker at the start of `text`, returning its byte
    /// length and the placeholder values.
    pub fn match_prefix(&self, text: &str) -> Option<MarkerMatch> {
        let mut pos = 0;
        let mut found = MarkerMatch {
            len: 0,
            id: None,
            offset: None,
        };
        for piece in &self.pieces {
            match piece {
                Piece::Literal(lit) => {
                    if !text[pos..].starts_with(lit.as_str()) {
                        return None;
                    }
                    pos += lit.len();
                }
                Piece::Id | Piece::Offset => {
                    let digits = text[pos..].bytes().take_while(u8::is_ascii_digit).count();
                    if digits == 0 {
                        return None;
                    }
                    let value = text[pos..pos + digits].parse::<u64>().ok()?;
                    if matches!(piece, Piece::Id) {
                        found.id = Some(value);
                    } else {
                        found.offset = Some(value);
                    }
                    pos += digits;
                }
            }
        }
        found.len = pos;
        Some(found)
    }
}

impl fmt::Debug for OpenTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("OpenTemplate").field(&self.source).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerMatch {
    pub len: usize,
    pub id: Option<u64>,
    pub offset: Option<u64>,
}
