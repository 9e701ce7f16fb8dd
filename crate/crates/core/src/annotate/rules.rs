//! Sentence/phrase segmentation and the three labeling rules.

use super::{AnnotateError, ObjectMention};
use crate::text::{Span, Token, TokenLabel};

/// Phrase delimiters: comma, period, and empty-text tokens such as an
/// end-of-sequence marker.
fn is_delimiter(t: &Token) -> bool {
    t.is_period() || t.is_comma() || t.text.is_empty()
}

/// Sentences ending at a period or an empty-text (end-of-sequence) token,
/// terminator included. Trailing tokens after the last terminator form a
/// final sentence. The result partitions `0..len`.
pub fn sentence_bounds(tokens: &[Token]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.is_period() || t.text.is_empty() {
            out.push(Span::new(start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(Span::new(start, tokens.len()));
    }
    out
}

/// Maximal runs of non-delimiter tokens inside each sentence.
pub fn phrase_bounds(tokens: &[Token], sentences: &[Span]) -> Vec<Span> {
    let mut out = Vec::new();
    for s in sentences {
        let mut start = None;
        for i in s.start..s.end {
            match (is_delimiter(&tokens[i]), start) {
                (false, None) => start = Some(i),
                (true, Some(a)) => {
                    out.push(Span::new(a, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            out.push(Span::new(a, s.end));
        }
    }
    out
}

/// Applies, in order: (1) every token ACCURATE; (2) for each inaccurate
/// mention, its whole sentence INACCURATE; (3) for each accurate mention,
/// its phrase back to ACCURATE. Mentions without an accuracy flag are
/// ignored.
pub fn label_tokens(
    len: usize,
    sentences: &[Span],
    phrases: &[Span],
    mentions: &[ObjectMention],
) -> Result<Vec<TokenLabel>, AnnotateError> {
    let sentence_of = |m: &ObjectMention| {
        sentences
            .iter()
            .find(|s| s.encloses(&m.token_span))
            .copied()
            .ok_or_else(|| AnnotateError::SpanOutsideSentences {
                object: m.object.clone(),
                token_span: m.token_span,
            })
    };
    for m in mentions {
        if m.token_span.is_empty() || m.token_span.end > len {
            return Err(AnnotateError::SpanOutsideSentences {
                object: m.object.clone(),
                token_span: m.token_span,
            });
        }
        sentence_of(m)?;
    }

    let mut labels = vec![TokenLabel::Accurate; len];
    for m in mentions.iter().filter(|m| m.accurate == Some(false)) {
        let s = sentence_of(m)?;
        labels[s.start..s.end].fill(TokenLabel::Inaccurate);
    }
    for m in mentions.iter().filter(|m| m.accurate == Some(true)) {
        let s = sentence_of(m)?;
        for p in phrases.iter().filter(|p| s.encloses(p) && p.overlaps(&m.token_span)) {
            labels[p.start..p.end].fill(TokenLabel::Accurate);
        }
    }
    Ok(labels)
}
