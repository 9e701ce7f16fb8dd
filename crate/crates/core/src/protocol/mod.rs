//! Backend protocol for vision-language models that can report next-token
//! distributions, greedy continuations, final-layer hidden states with and
//! without image conditioning, and yes/no answers to existence questions.
//!
//! [`LvlmBackend`] is the in-process contract. [`wire`] defines the
//! newline-delimited JSON encoding, [`server`] exposes any backend over
//! stdio or a local socket, and [`client::RemoteBackend`] speaks the wire
//! format back into the trait. [`conformance`] holds the checks every
//! backend is expected to pass.

pub mod client;
pub mod conformance;
pub mod server;
pub mod wire;

use crate::text::{TokenId, CAPTION_PROMPT, MAX_SEQUENCE_LEN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("could not parse backend reply {raw:?} as Yes/No")]
    Parse { raw: String },
    #[error("capability error: {0}")]
    Capability(String),
}

impl BackendError {
    /// Short machine-readable kind, used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::Input(_) => "input",
            BackendError::Protocol(_) => "protocol",
            BackendError::Parse { .. } => "parse",
            BackendError::Capability(_) => "capability",
        }
    }

    pub fn from_kind(kind: &str, message: String) -> Self {
        match kind {
            "transport" => BackendError::Transport(message),
            "input" => BackendError::Input(message),
            "parse" => BackendError::Parse { raw: message },
            "capability" => BackendError::Capability(message),
            _ => BackendError::Protocol(message),
        }
    }

    pub(crate) fn message(&self) -> String {
        match self {
            BackendError::Transport(m)
            | BackendError::Input(m)
            | BackendError::Protocol(m)
            | BackendError::Capability(m) => m.clone(),
            BackendError::Parse { raw } => raw.clone(),
        }
    }
}

/// The image, the prompt, and the caption tokens generated so far.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceContext {
    pub image_ref: Option<String>,
    pub prompt: String,
    pub prefix_tokens: Vec<TokenId>,
}

impl SequenceContext {
    /// Captioning context with the standard prompt.
    pub fn caption(image_ref: impl Into<String>, prefix_tokens: Vec<TokenId>) -> Self {
        Self {
            image_ref: Some(image_ref.into()),
            prompt: CAPTION_PROMPT.to_string(),
            prefix_tokens,
        }
    }

    pub fn with_prefix(&self, prefix_tokens: Vec<TokenId>) -> Self {
        Self {
            image_ref: self.image_ref.clone(),
            prompt: self.prompt.clone(),
            prefix_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::Input("prompt must be non-empty".into()));
        }
        if self.prefix_tokens.len() > MAX_SEQUENCE_LEN {
            return Err(BackendError::Input(format!(
                "prefix has {} tokens, cap is {MAX_SEQUENCE_LEN}",
                self.prefix_tokens.len()
            )));
        }
        Ok(())
    }
}

/// Top-k next tokens (descending probability, ties by ascending id) and the
/// final-layer hidden state at the query position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub top_tokens: Vec<(TokenId, f64)>,
    pub hidden: Vec<f32>,
}

impl StepResult {
    /// Checks ordering, range, length and hidden dimension.
    pub fn validate(&self, k: usize, hidden_dim: usize) -> Result<(), BackendError> {
        if self.top_tokens.len() != k {
            return Err(BackendError::Protocol(format!(
                "expected {k} tokens, got {}",
                self.top_tokens.len()
            )));
        }
        if self.hidden.len() != hidden_dim {
            return Err(BackendError::Protocol(format!(
                "hidden has dim {}, expected {hidden_dim}",
                self.hidden.len()
            )));
        }
        for &(_, p) in &self.top_tokens {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::Protocol(format!("probability {p} outside [0,1]")));
            }
        }
        for w in self.top_tokens.windows(2) {
            let ((ia, pa), (ib, pb)) = (w[0], w[1]);
            if pa < pb || (pa == pb && ia > ib) {
                return Err(BackendError::Protocol(
                    "top tokens not sorted by probability then id".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Result of a greedy continuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyOutput {
    pub tokens: Vec<TokenId>,
    /// The global length cap was reached before a stop token.
    pub truncated: bool,
}

/// Hidden states for one caption position, computed with (`x1`) and
/// without (`x2`) the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStatePair {
    pub x1: Vec<f32>,
    pub x2: Vec<f32>,
    pub position: usize,
    pub token_id: TokenId,
}

impl HiddenStatePair {
    pub fn dim(&self) -> usize {
        self.x1.len()
    }

    pub fn delta(&self) -> Vec<f32> {
        self.x1.iter().zip(&self.x2).map(|(a, b)| a - b).collect()
    }
}

/// Static facts about a backend: hidden size and the token table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub hidden_dim: usize,
    pub vocab: Vec<String>,
    pub eos_id: TokenId,
    pub period_id: TokenId,
    pub comma_id: TokenId,
    pub max_sequence_len: usize,
}

impl ModelInfo {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_text(&self, id: TokenId) -> &str {
        if id == self.eos_id {
            return "";
        }
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.vocab.iter().position(|w| w == text).map(|i| i as TokenId)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        crate::text::detokenize(ids.iter().map(|&i| self.token_text(i)))
    }

    pub fn stop_tokens(&self) -> [TokenId; 2] {
        [self.period_id, self.eos_id]
    }
}

/// Existence question for the discriminative task.
pub fn discriminative_question(object: &str) -> String {
    let o = object.trim();
    let article = match o.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    };
    format!("Is there {article} {o} in the image? Answer with only Yes or No.")
}

/// Parses a Yes/No reply. Surrounding whitespace, case and trailing
/// punctuation are ignored; anything else is a parse error carrying the raw
/// reply.
pub fn parse_yes_no(raw: &str) -> Result<bool, BackendError> {
    let t = raw
        .trim()
        .trim_end_matches(|c: char| c == '.' || c == '!')
        .to_ascii_lowercase();
    match t.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(BackendError::Parse {
            raw: raw.to_string(),
        }),
    }
}

/// A vision-language model reachable for the four captioning operations.
///
/// Implementations must be deterministic for a fixed backend state.
pub trait LvlmBackend: Send + Sync {
    fn model_info(&self) -> Result<ModelInfo, BackendError>;

    /// The `k` most probable next tokens. Entries beyond the distribution's
    /// support carry probability 0 and are ordered by id.
    fn top_k_next(
        &self,
        ctx: &SequenceContext,
        k: usize,
        with_image: bool,
    ) -> Result<StepResult, BackendError>;

    /// Argmax continuation until a stop token (included) or the global cap.
    fn greedy_extend(
        &self,
        ctx: &SequenceContext,
        stop_tokens: &[TokenId],
        with_image: bool,
    ) -> Result<GreedyOutput, BackendError>;

    /// One final-layer hidden vector per entry of `tokens`, which are
    /// appended after `ctx.prefix_tokens`.
    fn final_hidden_states(
        &self,
        ctx: &SequenceContext,
        tokens: &[TokenId],
        with_image: bool,
    ) -> Result<Vec<Vec<f32>>, BackendError>;

    /// Raw reply to an existence question about `object_name`.
    fn discriminative_reply(
        &self,
        image_ref: &str,
        object_name: &str,
        question: &str,
    ) -> Result<String, BackendError>;

    fn discriminative_query(&self, image_ref: &str, object_name: &str) -> Result<bool, BackendError> {
        let q = discriminative_question(object_name);
        let raw = self.discriminative_reply(image_ref, object_name, &q)?;
        parse_yes_no(&raw)
    }
}

impl<B: LvlmBackend + ?Sized> LvlmBackend for std::sync::Arc<B> {
    fn model_info(&self) -> Result<ModelInfo, BackendError> {
        (**self).model_info()
    }
    fn top_k_next(&self, ctx: &SequenceContext, k: usize, with_image: bool) -> Result<StepResult, BackendError> {
        (**self).top_k_next(ctx, k, with_image)
    }
    fn greedy_extend(
        &self,
        ctx: &SequenceContext,
        stop_tokens: &[TokenId],
        with_image: bool,
    ) -> Result<GreedyOutput, BackendError> {
        (**self).greedy_extend(ctx, stop_tokens, with_image)
    }
    fn final_hidden_states(
        &self,
        ctx: &SequenceContext,
        tokens: &[TokenId],
        with_image: bool,
    ) -> Result<Vec<Vec<f32>>, BackendError> {
        (**self).final_hidden_states(ctx, tokens, with_image)
    }
    fn discriminative_reply(&self, image_ref: &str, object_name: &str, question: &str) -> Result<String, BackendError> {
        (**self).discriminative_reply(image_ref, object_name, question)
    }
}

/// Fetches `(x1, x2)` for every token of `tokens` after `ctx`'s prefix. The
/// two passes are issued concurrently.
pub fn hidden_state_pairs<B: LvlmBackend + ?Sized>(
    backend: &B,
    ctx: &SequenceContext,
    tokens: &[TokenId],
) -> Result<Vec<HiddenStatePair>, BackendError> {
    let (with, without) = std::thread::scope(|s| {
        let h = s.spawn(|| backend.final_hidden_states(ctx, tokens, true));
        let without = backend.final_hidden_states(ctx, tokens, false);
        let with = h
            .join()
            .unwrap_or_else(|_| Err(BackendError::Transport("hidden-state worker panicked".into())));
        (with, without)
    });
    let (with, without) = (with?, without?);
    if with.len() != tokens.len() || without.len() != tokens.len() {
        return Err(BackendError::Protocol(format!(
            "expected {} hidden vectors, got {} / {}",
            tokens.len(),
            with.len(),
            without.len()
        )));
    }
    let base = ctx.prefix_tokens.len();
    with.into_iter()
        .zip(without)
        .zip(tokens)
        .enumerate()
        .map(|(i, ((x1, x2), &token_id))| {
            if x1.len() != x2.len() {
                return Err(BackendError::Protocol(format!(
                    "hidden dims differ at position {}: {} vs {}",
                    base + i,
                    x1.len(),
                    x2.len()
                )));
            }
            Ok(HiddenStatePair {
                x1,
                x2,
                position: base + i,
                token_id,
            })
        })
        .collect()
}
