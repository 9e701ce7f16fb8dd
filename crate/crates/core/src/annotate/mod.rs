//! Object-mention extraction and token-level ACCURATE/INACCURATE labels.
//!
//! A caption is split into period-delimited sentences and comma/period
//! delimited phrases. Every token starts ACCURATE; each sentence holding an
//! inaccurate object becomes INACCURATE; each phrase holding an accurate
//! object is then reset to ACCURATE.

mod lexicon;
mod rules;

pub use lexicon::{
    parse_object_list, regular_plural, Completion, Lexicon, LexiconError, LexiconExtractor, LlmExtractor,
    DEFAULT_LEXICON_TSV, OBJECT_EXTRACTION_PROMPT,
};
pub use rules::{label_tokens, phrase_bounds, sentence_bounds};

use crate::fusion::{classify_object, predict_p_exist, DetectionScoreRecord, FusionModel, ObjectVerdict};
use crate::text::{align_offsets, word_spans, Span, Token, TokenLabel};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

/// One extracted object; `char_span` is absent when the extractor only
/// names objects (LLM route).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractedObject {
    pub object: String,
    pub char_span: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("object extraction failed: {message}")]
pub struct ExtractError {
    pub message: String,
    pub partial: Vec<ExtractedObject>,
}

pub trait ObjectExtractor: Send + Sync {
    fn extract(&self, caption: &str) -> Result<Vec<ExtractedObject>, ExtractError>;
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum AnnotateError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("object extraction failed: {message}")]
    Extraction { message: String, partial: Vec<ObjectMention> },
    #[error("mention {object:?} at tokens {token_span:?} lies outside every sentence")]
    SpanOutsideSentences { object: String, token_span: Span },
    #[error("caption {caption_id}: token {index} could not be aligned to the text")]
    Alignment { caption_id: String, index: usize },
    #[error("mention {object:?} at bytes {char_span:?} covers no token")]
    UnalignedMention { object: String, char_span: Span },
    #[error("captions without tokenization: {}", .0.join(", "))]
    MissingTokens(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMention {
    /// Singular form.
    pub object: String,
    /// Byte range in the caption text.
    pub char_span: Span,
    /// Token range in the caption's token list.
    pub token_span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_exist: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accurate: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCaption {
    pub caption_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<TokenLabel>,
    pub sentence_bounds: Vec<Span>,
    pub phrase_bounds: Vec<Span>,
    pub mentions: Vec<ObjectMention>,
}

impl AnnotatedCaption {
    pub fn inaccurate_count(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_accurate()).count()
    }
}

/// Token span of byte range `span` given token offsets.
fn token_span_for(offsets: &[(usize, usize)], span: Span) -> Option<Span> {
    let hits: Vec<usize> = offsets
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < e && s < span.end && span.start < e)
        .map(|(i, _)| i)
        .collect();
    Some(Span::new(*hits.first()?, hits.last()? + 1))
}

/// Mentions in `caption`, in singular form, sorted by position and
/// de-duplicated by `(object, span)`. Objects named without a span are
/// located in the text through their inflections; objects that cannot be
/// located are dropped. Token spans refer to the word tokenization
/// ([`word_spans`]) of the caption.
pub fn extract_mentions(
    caption: &str,
    extractor: &dyn ObjectExtractor,
    inflections: &Lexicon,
) -> Result<Vec<ObjectMention>, AnnotateError> {
    if caption.trim().is_empty() {
        return Err(AnnotateError::EmptyCaption);
    }
    let offsets = word_spans(caption);
    let resolve = |found: Vec<ExtractedObject>| -> Vec<ObjectMention> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for f in found {
            let object = f.object.trim().to_lowercase();
            let spans = match f.char_span {
                Some(s) => vec![s],
                None => {
                    let spans = Lexicon::from_lemmas([&object], inflections).locate(caption, &object);
                    if spans.is_empty() {
                        tracing::debug!(object = %object, "extracted object not found in caption text");
                    }
                    spans
                }
            };
            for (s, e) in spans {
                let char_span = Span::new(s, e);
                let Some(token_span) = token_span_for(&offsets, char_span) else { continue };
                if seen.insert((object.clone(), s, e)) {
                    out.push(ObjectMention {
                        object: object.clone(),
                        char_span,
                        token_span,
                        p_exist: None,
                        accurate: None,
                    });
                }
            }
        }
        out.sort_by(|a, b| (a.char_span, &a.object).cmp(&(b.char_span, &b.object)));
        out
    };
    match extractor.extract(caption) {
        Ok(found) => Ok(resolve(found)),
        Err(e) => Err(AnnotateError::Extraction {
            message: e.message,
            partial: resolve(e.partial),
        }),
    }
}

/// Re-targets mention token spans onto `tokens` using their byte offsets.
pub fn align_mentions(
    mentions: &mut [ObjectMention],
    tokens: &[Token],
) -> Result<(), AnnotateError> {
    let offsets: Vec<(usize, usize)> = tokens.iter().map(|t| t.offset.unwrap_or((0, 0))).collect();
    for m in mentions {
        m.token_span = token_span_for(&offsets, m.char_span).ok_or_else(|| AnnotateError::UnalignedMention {
            object: m.object.clone(),
            char_span: m.char_span,
        })?;
    }
    Ok(())
}

/// Labels one tokenized caption from mentions that already carry their
/// accuracy flags.
pub fn annotate_caption(
    caption_id: &str,
    text: &str,
    tokens: Vec<Token>,
    mentions: Vec<ObjectMention>,
) -> Result<AnnotatedCaption, AnnotateError> {
    let sentences = sentence_bounds(&tokens);
    let phrases = phrase_bounds(&tokens, &sentences);
    let labels = label_tokens(tokens.len(), &sentences, &phrases, &mentions)?;
    Ok(AnnotatedCaption {
        caption_id: caption_id.to_string(),
        text: text.to_string(),
        tokens,
        labels,
        sentence_bounds: sentences,
        phrase_bounds: phrases,
        mentions,
    })
}

/// A caption to annotate. `tokens` carry the generating model's ids; their
/// offsets are filled by alignment when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<Token>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub captions: usize,
    pub tokens: usize,
    pub accurate_tokens: usize,
    pub inaccurate_tokens: usize,
    pub accurate_fraction: f64,
    pub mentions: usize,
    pub accurate_mentions: usize,
    pub inaccurate_mentions: usize,
    /// Mentions with no (or only a partial) score record; they take no
    /// part in labeling.
    pub unscored_mentions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusAnnotation {
    pub captions: Vec<AnnotatedCaption>,
    pub summary: AnnotationSummary,
}

/// Extracts mentions, scores them with the fusion model against
/// `scores` (keyed by caption id and object), and labels every caption.
/// Output is ordered by caption id.
pub fn annotate_corpus(
    captions: &[CaptionRecord],
    extractor: &dyn ObjectExtractor,
    inflections: &Lexicon,
    model: &FusionModel,
    scores: &[DetectionScoreRecord],
    threshold: f64,
) -> Result<CorpusAnnotation, AnnotateError> {
    let missing: Vec<String> = captions
        .iter()
        .filter(|c| c.tokens.is_none())
        .map(|c| c.caption_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnnotateError::MissingTokens(missing));
    }
    let index: HashMap<(&str, &str), &DetectionScoreRecord> = scores
        .iter()
        .map(|r| ((r.caption_id.as_str(), r.object.as_str()), r))
        .collect();

    let mut summary = AnnotationSummary::default();
    let mut out = Vec::with_capacity(captions.len());
    let mut order: Vec<&CaptionRecord> = captions.iter().collect();
    order.sort_by(|a, b| a.caption_id.cmp(&b.caption_id));
    for c in order {
        let mut tokens = c.tokens.clone().unwrap_or_default();
        align_offsets(&c.text, &mut tokens).map_err(|index| AnnotateError::Alignment {
            caption_id: c.caption_id.clone(),
            index,
        })?;
        let mut mentions = if c.text.trim().is_empty() {
            Vec::new()
        } else {
            extract_mentions(&c.text, extractor, inflections)?
        };
        align_mentions(&mut mentions, &tokens)?;
        for m in &mut mentions {
            let rec = index
                .get(&(c.caption_id.as_str(), m.object.as_str()))
                .filter(|r| !r.is_partial());
            match rec {
                Some(r) => {
                    let p = predict_p_exist(model, r).map_err(|e| AnnotateError::Extraction {
                        message: e.to_string(),
                        partial: Vec::new(),
                    })?;
                    m.p_exist = Some(p);
                    m.accurate = Some(classify_object(p, threshold) == ObjectVerdict::Accurate);
                }
                None => summary.unscored_mentions += 1,
            }
        }
        let annotated = annotate_caption(&c.caption_id, &c.text, tokens, mentions)?;
        summary.mentions += annotated.mentions.len();
        summary.accurate_mentions += annotated.mentions.iter().filter(|m| m.accurate == Some(true)).count();
        summary.inaccurate_mentions += annotated.mentions.iter().filter(|m| m.accurate == Some(false)).count();
        summary.tokens += annotated.labels.len();
        summary.inaccurate_tokens += annotated.inaccurate_count();
        out.push(annotated);
    }
    summary.captions = out.len();
    summary.accurate_tokens = summary.tokens - summary.inaccurate_tokens;
    summary.accurate_fraction = if summary.tokens == 0 {
        0.0
    } else {
        summary.accurate_tokens as f64 / summary.tokens as f64
    };
    Ok(CorpusAnnotation { captions: out, summary })
}
