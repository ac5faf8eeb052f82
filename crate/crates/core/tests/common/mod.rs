//! Reference implementations used as oracles. They share no code with the
//! library beyond its public types.

#![allow(dead_code)]

/// Byte ranges of tokens under the default rule, by a direct character scan.
pub fn scan_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut tokens: Vec<(usize, usize)> = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let end = i + c.len_utf8();
        if c.is_whitespace() {
            in_word = false;
        } else if c.is_alphanumeric() {
            if in_word {
                tokens.last_mut().unwrap().1 = end;
            } else {
                tokens.push((i, end));
            }
            in_word = true;
        } else {
            tokens.push((i, end));
            in_word = false;
        }
    }
    tokens
}

pub fn scan_count(text: &str) -> u64 {
    scan_tokens(text).len() as u64
}

/// Every `t`-th token boundary strictly inside a text of `l` tokens.
pub fn expected_offsets(l: u64, t: u64) -> Vec<u64> {
    (1..).map(|k| k * t).take_while(|&o| o < l).collect()
}

/// Expected inline rendering with the default sentinels and a single
/// interruption text, built from the scanned token ends.
pub fn expected_inline(text: &str, t: u64, first_id: u64, interruption: &str) -> String {
    let tokens = scan_tokens(text);
    let mut out = String::new();
    let mut last = 0;
    for (k, off) in expected_offsets(tokens.len() as u64, t).into_iter().enumerate() {
        let end = tokens[off as usize - 1].1;
        out.push_str(&text[last..end]);
        out.push_str(&format!(
            "[[RIC-INT id={} off={off}]]{interruption}[[/RIC-INT]]",
            first_id + k as u64
        ));
        last = end;
    }
    out.push_str(&text[last..]);
    out
}

pub const WORDS: &[&str] = &[
    "alpha", "b", "42", "x1", "naïve", "日本語", "über", "Ωmega", "ß", "3.14", "a_b", "don't",
    ",", ".", "!", "?", "—", "(", ")", "😀", "#", "&&", "->", "'", "\"",
];
pub const SPACES: &[&str] = &[" ", "  ", "\n", "\t", " \n ", "", "\u{00a0}", "\r\n"];

/// Arbitrary text assembled from `choices`, alternating words and
/// (possibly empty) whitespace so adjacent words may fuse.
pub fn build_text(choices: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for &(w, s) in choices {
        out.push_str(WORDS[w % WORDS.len()]);
        out.push_str(SPACES[s % SPACES.len()]);
    }
    out
}
