//! Sentence-level decoding: branch on the first token of each sentence,
//! complete every branch greedily, keep the candidate whose tokens the
//! classifier trusts most, and finally drop sentences scoring below the
//! threshold.

use crate::classifier::{ClassifierError, TokenClassifier};
use crate::protocol::{hidden_state_pairs, BackendError, LvlmBackend, ModelInfo, SequenceContext};
use crate::text::{TokenId, TokenLabel, CAPTION_PROMPT, MAX_SEQUENCE_LEN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("round {round} produced no candidates")]
    NoCandidates { round: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// First-token branching factor.
    pub k: usize,
    /// Minimum sentence score kept in the final caption.
    pub threshold: f64,
    pub max_total_tokens: usize,
    pub prompt: String,
    /// Stop only when the selected candidate ends the caption, instead of
    /// when any candidate of the round does.
    pub break_on_selected_eos: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 3,
            threshold: 0.5,
            max_total_tokens: MAX_SEQUENCE_LEN,
            prompt: CAPTION_PROMPT.to_string(),
            break_on_selected_eos: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.k == 0 {
            return Err(DecodeError::Config("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DecodeError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.max_total_tokens == 0 || self.max_total_tokens > MAX_SEQUENCE_LEN {
            return Err(DecodeError::Config(format!("max_total_tokens must be in 1..={MAX_SEQUENCE_LEN}")));
        }
        if self.prompt.trim().is_empty() {
            return Err(DecodeError::Config("prompt must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub first_token_prob: f64,
    /// Fraction of tokens classified ACCURATE; set by scoring.
    pub accurate: f64,
    pub labels: Vec<TokenLabel>,
    pub contains_eos: bool,
    /// The length cap cut the sentence short.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub prefix_len: usize,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Cap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRun {
    pub image_ref: String,
    pub config: DecodeConfig,
    /// Selected sentences in order.
    pub sents: Vec<String>,
    pub sent_tokens: Vec<Vec<TokenId>>,
    pub accu: Vec<f64>,
    pub final_caption: String,
    pub stop: StopReason,
    pub rounds: Vec<Round>,
}

impl DecodeRun {
    /// All selected tokens, i.e. the final prefix.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.sent_tokens.concat()
    }

    /// Indices of sentences kept at threshold `t`.
    pub fn retained(&self, t: f64) -> Vec<usize> {
        (0..self.accu.len()).filter(|&i| self.accu[i] >= t).collect()
    }

    /// The caption this transcript yields at threshold `t`.
    pub fn caption_at(&self, t: f64) -> String {
        join_sentences(self.retained(t).into_iter().map(|i| self.sents[i].as_str()))
    }
}

/// Joins non-empty sentences with single spaces.
pub fn join_sentences<'a, I: IntoIterator<Item = &'a str>>(sents: I) -> String {
    sents
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// The `k` most probable first tokens after `ctx`, each completed greedily
/// to a period or end of sequence. Zero-probability tokens are skipped, so
/// fewer than `k` candidates may come back.
pub fn top_k_first_token_sampling<B: LvlmBackend + ?Sized>(
    backend: &B,
    info: &ModelInfo,
    ctx: &SequenceContext,
    k: usize,
    max_total_tokens: usize,
) -> Result<Vec<Candidate>, DecodeError> {
    let room = max_total_tokens.saturating_sub(ctx.prefix_tokens.len());
    if room == 0 {
        return Ok(Vec::new());
    }
    let step = backend.top_k_next(ctx, k, true)?;
    let stops = info.stop_tokens();
    let mut out = Vec::new();
    for (first, p) in step.top_tokens {
        if !(p > 0.0) {
            continue;
        }
        let mut tokens = vec![first];
        let mut truncated = false;
        if !stops.contains(&first) {
            if room == 1 {
                truncated = true;
            } else {
                let mut prefix = ctx.prefix_tokens.clone();
                prefix.push(first);
                let g = backend.greedy_extend(&ctx.with_prefix(prefix), &stops, true)?;
                tokens.extend(g.tokens);
                truncated = g.truncated;
                if tokens.len() > room {
                    tokens.truncate(room);
                    truncated = true;
                }
                if !truncated && !tokens.last().is_some_and(|t| stops.contains(t)) {
                    truncated = true;
                }
            }
        }
        out.push(Candidate {
            text: info.detokenize(&tokens),
            contains_eos: truncated || tokens.contains(&info.eos_id),
            tokens,
            first_token_prob: p,
            accurate: 0.0,
            labels: Vec::new(),
            truncated,
        });
    }
    Ok(out)
}

/// Classifies every candidate token from its hidden states with and
/// without the image; returns the ACCURATE fraction and the labels.
pub fn compute_accurate<B, C>(
    backend: &B,
    classifier: &C,
    ctx: &SequenceContext,
    candidate: &[TokenId],
) -> Result<(f64, Vec<TokenLabel>), DecodeError>
where
    B: LvlmBackend + ?Sized,
    C: TokenClassifier + ?Sized,
{
    if candidate.is_empty() {
        return Err(DecodeError::Config("cannot score an empty candidate".into()));
    }
    let pairs = hidden_state_pairs(backend, ctx, candidate)?;
    let labels = classifier.classify(&pairs)?;
    let good = labels.iter().filter(|l| l.is_accurate()).count();
    Ok((good as f64 / labels.len() as f64, labels))
}

/// Index of the best score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn sentence_level_decode<B, C>(
    backend: &B,
    classifier: &C,
    image_ref: &str,
    config: &DecodeConfig,
) -> Result<DecodeRun, DecodeError>
where
    B: LvlmBackend + ?Sized,
    C: TokenClassifier + ?Sized,
{
    config.validate()?;
    let info = backend.model_info()?;
    if let Some(d) = classifier.input_dim() {
        if d != info.hidden_dim {
            return Err(DecodeError::Config(format!(
                "classifier expects {d} features but the backend's hidden size is {}",
                info.hidden_dim
            )));
        }
    }
    let cap = config.max_total_tokens.min(info.max_sequence_len);
    let base = SequenceContext {
        image_ref: Some(image_ref.to_string()),
        prompt: config.prompt.clone(),
        prefix_tokens: Vec::new(),
    };
    let mut prefix: Vec<TokenId> = Vec::new();
    let mut run = DecodeRun {
        image_ref: image_ref.to_string(),
        config: config.clone(),
        sents: Vec::new(),
        sent_tokens: Vec::new(),
        accu: Vec::new(),
        final_caption: String::new(),
        stop: StopReason::Cap,
        rounds: Vec::new(),
    };
    while prefix.len() < cap {
        let ctx = base.with_prefix(prefix.clone());
        let mut cands = top_k_first_token_sampling(backend, &info, &ctx, config.k, cap)?;
        if cands.is_empty() {
            return Err(DecodeError::NoCandidates { round: run.rounds.len() });
        }
        for c in &mut cands {
            let (score, labels) = compute_accurate(backend, classifier, &ctx, &c.tokens)?;
            c.accurate = score;
            c.labels = labels;
        }
        let scores: Vec<f64> = cands.iter().map(|c| c.accurate).collect();
        let sel = select_best(&scores).expect("non-empty");
        let chosen = &cands[sel];
        // The round's sentence is kept even when another candidate ended it.
        let done = if config.break_on_selected_eos {
            chosen.contains_eos
        } else {
            cands.iter().any(|c| c.contains_eos)
        };
        prefix.extend(&chosen.tokens);
        run.sents.push(chosen.text.clone());
        run.sent_tokens.push(chosen.tokens.clone());
        run.accu.push(chosen.accurate);
        tracing::debug!(round = run.rounds.len(), selected = sel, score = chosen.accurate, "sentence selected");
        run.rounds.push(Round {
            prefix_len: ctx.prefix_tokens.len(),
            candidates: cands,
            selected: sel,
        });
        if done {
            run.stop = StopReason::Eos;
            break;
        }
    }
    run.final_caption = run.caption_at(config.threshold);
    Ok(run)
}
