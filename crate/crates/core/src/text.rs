//! Token-level primitives shared by every stage: token ids, per-token labels,
//! a small word tokenizer with character offsets, and detokenization.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Vocabulary index.
pub type TokenId = u32;

/// Global cap on caption length in tokens.
pub const MAX_SEQUENCE_LEN: usize = 512;

/// Prompt used for every caption generation request.
pub const CAPTION_PROMPT: &str = "Describe the image in detail.";

/// Per-token annotation. Serialized as the class names used in datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenLabel {
    Accurate,
    Inaccurate,
}

impl TokenLabel {
    /// Class index as stored in feature datasets: 1 = ACCURATE, 0 = INACCURATE.
    pub fn class_index(self) -> u8 {
        match self {
            TokenLabel::Accurate => 1,
            TokenLabel::Inaccurate => 0,
        }
    }

    pub fn from_class_index(v: u8) -> Option<Self> {
        match v {
            1 => Some(TokenLabel::Accurate),
            0 => Some(TokenLabel::Inaccurate),
            _ => None,
        }
    }

    pub fn is_accurate(self) -> bool {
        self == TokenLabel::Accurate
    }
}

impl fmt::Display for TokenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenLabel::Accurate => write!(f, "ACCURATE"),
            TokenLabel::Inaccurate => write!(f, "INACCURATE"),
        }
    }
}

/// A caption token: vocabulary id, surface text, and optionally its byte
/// offsets `[start, end)` in the caption text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<(usize, usize)>,
}

impl Token {
    pub fn new(id: TokenId, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
            offset: None,
        }
    }

    pub fn is_period(&self) -> bool {
        self.text == "."
    }

    pub fn is_comma(&self) -> bool {
        self.text == ","
    }
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn encloses(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '(' | ')')
}

/// Splits text into words and single-character punctuation with byte
/// offsets. Apostrophes and hyphens stay inside words.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_punct(c) {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
            if is_punct(c) {
                out.push((i, i + c.len_utf8()));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Tokenizes free text into [`Token`]s with offsets. Ids are assigned by
/// `lookup`; unknown words get `unknown_id`.
pub fn tokenize_words<F>(text: &str, mut lookup: F, unknown_id: TokenId) -> Vec<Token>
where
    F: FnMut(&str) -> Option<TokenId>,
{
    word_spans(text)
        .into_iter()
        .map(|(s, e)| {
            let w = &text[s..e];
            Token {
                id: lookup(w).unwrap_or(unknown_id),
                text: w.to_string(),
                offset: Some((s, e)),
            }
        })
        .collect()
}

/// Joins token texts: a single space between words, none before closing
/// punctuation. Empty texts (e.g. an end-of-sequence marker) are skipped.
pub fn detokenize<'a, I>(pieces: I) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = String::new();
    for p in pieces {
        if p.is_empty() {
            continue;
        }
        let closing = p.chars().all(|c| matches!(c, '.' | ',' | ';' | ':' | '!' | '?'));
        if !out.is_empty() && !closing {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// Fills missing token offsets by aligning token texts left to right
/// against `text`. Returns the index of the first token that could not be
/// placed.
pub fn align_offsets(text: &str, tokens: &mut [Token]) -> Result<(), usize> {
    let mut cursor = 0usize;
    for (i, tok) in tokens.iter_mut().enumerate() {
        if let Some((_, e)) = tok.offset {
            cursor = e;
            continue;
        }
        if tok.text.is_empty() {
            tok.offset = Some((cursor, cursor));
            continue;
        }
        let rest = &text[cursor..];
        let trimmed = rest.trim_start();
        let skip = rest.len() - trimmed.len();
        let found = if trimmed.starts_with(tok.text.as_str()) {
            Some(skip)
        } else {
            rest.find(tok.text.as_str())
        };
        match found {
            Some(rel) => {
                let s = cursor + rel;
                let e = s + tok.text.len();
                tok.offset = Some((s, e));
                cursor = e;
            }
            None => return Err(i),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_and_punctuation_split() {
        let t = "Two dogs, near a bench.";
        let words: Vec<&str> = word_spans(t).iter().map(|&(s, e)| &t[s..e]).collect();
        assert_eq!(words, ["Two", "dogs", ",", "near", "a", "bench", "."]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let s = detokenize(["A", "dog", ",", "a", "cat", ".", "", "Done", "."]);
        assert_eq!(s, "A dog, a cat. Done.");
    }

    #[test]
    fn alignment_recovers_offsets() {
        let text = "A dog , near a bench.";
        let mut toks: Vec<Token> = ["A", "dog", ",", "near", "a", "bench", "."]
            .iter()
            .enumerate()
            .map(|(i, w)| Token::new(i as u32, *w))
            .collect();
        align_offsets(text, &mut toks).unwrap();
        assert_eq!(toks[5].offset, Some((15, 20)));
        assert_eq!(&text[toks[6].offset.unwrap().0..toks[6].offset.unwrap().1], ".");
    }

    #[test]
    fn alignment_reports_missing_token() {
        let mut toks = vec![Token::new(0, "cat")];
        assert_eq!(align_offsets("a dog", &mut toks), Err(0));
    }

    #[test]
    fn label_class_indices() {
        assert_eq!(TokenLabel::Accurate.class_index(), 1);
        assert_eq!(TokenLabel::from_class_index(0), Some(TokenLabel::Inaccurate));
        assert_eq!(TokenLabel::from_class_index(7), None);
    }
}
