//! Deterministic simulated vision-language model.
//!
//! Captions are built from sentence templates keyed by their first token.
//! Each object slot is filled with a true scene object or, with probability
//! given by the position curve, an injected non-scene object. A token is
//! *grounded* exactly when the annotation rules label it ACCURATE given the
//! scene's true objects; only grounded tokens receive the image signal in
//! their hidden state and only grounded targets have an image-dependent
//! next-token distribution.

mod config;
mod vocab;

pub use config::{
    MockBehavior, MockConfig, RateCurve, SceneGenerator, SceneSpec, DEFAULT_FILLERS,
    DEFAULT_OBJECTS, DEFAULT_TEMPLATES,
};
pub use vocab::{Vocab, COMMA, EOS, EOS_TEXT, PERIOD};

use crate::fusion::DetectionScoreRecord;
use crate::protocol::{
    hidden_state_pairs, BackendError, GreedyOutput, HiddenStatePair, LvlmBackend, ModelInfo, SequenceContext, StepResult,
};
use crate::text::{TokenId, TokenLabel, MAX_SEQUENCE_LEN};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;
use vocab::Part;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MockError {
    #[error("mock configuration error: {0}")]
    Config(String),
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
}

impl From<MockError> for BackendError {
    fn from(e: MockError) -> Self {
        BackendError::Input(e.to_string())
    }
}

const TAG_INJECT: u64 = 1;
const TAG_PICK: u64 = 2;
const TAG_BASE: u64 = 3;
const TAG_SIGNAL: u64 = 4;
const TAG_DISTRACT: u64 = 5;
const TAG_DETECT: u64 = 6;
/// Token id standing in for the prompt's last position.
const PROMPT_END: u64 = u32::MAX as u64;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &p| splitmix(h ^ splitmix(p)))
}

fn unit(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}

fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct SceneState {
    spec: SceneSpec,
    present: Vec<TokenId>,
    absent: Vec<TokenId>,
}

impl SceneState {
    fn contains(&self, id: TokenId) -> bool {
        self.present.binary_search(&id).is_ok()
    }
}

/// One object slot of a planned sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSlot {
    /// Token index inside the sentence.
    pub index: usize,
    pub object: TokenId,
    pub injected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePlan {
    pub tokens: Vec<TokenId>,
    pub slots: Vec<PlannedSlot>,
}

/// Ground truth for one token sequence of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthExport {
    pub scene_id: String,
    pub labels: Vec<TokenLabel>,
    /// Positions of object tokens and whether each was injected.
    pub mentions: Vec<(usize, String, bool)>,
    pub objects: BTreeSet<String>,
}

/// A greedy caption with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockCaption {
    pub scene_id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub truth: GroundTruthExport,
}

/// The simulated backend. Immutable after construction.
pub struct MockLvlm {
    behavior: MockBehavior,
    vocab: Vocab,
    scenes: BTreeMap<String, SceneState>,
    opening: Vec<(TokenId, f64)>,
    continuation: Vec<(TokenId, f64)>,
    closing: Vec<(TokenId, f64)>,
}

impl MockLvlm {
    pub fn new(scenes: Vec<SceneSpec>, behavior: MockBehavior) -> Result<Self, MockError> {
        behavior.hallucination_rate.validate().map_err(MockError::Config)?;
        if behavior.hidden_dim < 8 {
            return Err(MockError::Config("hidden_dim must be at least 8".into()));
        }
        if !(behavior.grounded_signal_magnitude > 0.0 && behavior.grounded_signal_magnitude.is_finite()) {
            return Err(MockError::Config("grounded_signal_magnitude must be positive".into()));
        }
        if !(behavior.target_mass > 0.0 && behavior.target_mass < 1.0) {
            return Err(MockError::Config("target_mass must be in (0,1)".into()));
        }
        if !(behavior.image_sharpening >= 1.0) {
            return Err(MockError::Config("image_sharpening must be >= 1".into()));
        }
        if behavior.sentences_per_caption == 0 {
            return Err(MockError::Config("sentences_per_caption must be positive".into()));
        }
        if !(0.0..=1.0).contains(&behavior.detector_noise) {
            return Err(MockError::Config("detector_noise must be in [0,1]".into()));
        }
        let vocab = Vocab::build(&behavior.templates, &behavior.objects, &behavior.fillers)?;
        let table = |name: &str, t: &[(String, f64)]| -> Result<Vec<(TokenId, f64)>, MockError> {
            let total: f64 = t.iter().map(|x| x.1).sum();
            if t.is_empty() || !(total > 0.0) || t.iter().any(|x| !(x.1 >= 0.0)) {
                return Err(MockError::Config(format!("{name} weights must be non-negative with positive sum")));
            }
            t.iter()
                .map(|(w, p)| {
                    let id = vocab
                        .id(w)
                        .filter(|&id| id == EOS || vocab.template(id).is_some())
                        .ok_or_else(|| {
                            MockError::Config(format!("{name} word {w:?} is neither <eos> nor a template key"))
                        })?;
                    Ok((id, p / total))
                })
                .collect()
        };
        let opening = table("opening", &behavior.opening)?;
        let continuation = table("continuation", &behavior.continuation)?;
        let closing = table("closing", &behavior.closing)?;

        let mut states = BTreeMap::new();
        for spec in scenes {
            let mut present = Vec::new();
            for o in &spec.true_objects {
                match vocab.id(o).filter(|&id| vocab.is_object(id)) {
                    Some(id) => present.push(id),
                    None => {
                        return Err(MockError::Config(format!(
                            "scene {:?} object {o:?} is not a vocabulary noun",
                            spec.scene_id
                        )))
                    }
                }
            }
            present.sort_unstable();
            let absent = vocab
                .objects()
                .iter()
                .copied()
                .filter(|id| present.binary_search(id).is_err())
                .collect();
            let id = spec.scene_id.clone();
            if states
                .insert(id.clone(), SceneState { spec, present, absent })
                .is_some()
            {
                return Err(MockError::Config(format!("duplicate scene id {id:?}")));
            }
        }
        Ok(Self {
            behavior,
            vocab,
            scenes: states,
            opening,
            continuation,
            closing,
        })
    }

    pub fn from_config(cfg: &MockConfig) -> Result<Self, MockError> {
        let mut scenes = cfg.scenes.clone();
        if let Some(g) = &cfg.generate {
            scenes.extend(generate_scenes(g, &cfg.behavior.objects)?);
        }
        Self::new(scenes, cfg.behavior.clone())
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }

    pub fn scene(&self, id: &str) -> Result<&SceneSpec, MockError> {
        self.state(id).map(|s| &s.spec)
    }

    fn state(&self, id: &str) -> Result<&SceneState, MockError> {
        self.scenes
            .get(id)
            .ok_or_else(|| MockError::UnknownScene(id.to_string()))
    }

    fn state_for(&self, ctx: &SequenceContext) -> Result<&SceneState, BackendError> {
        let id = ctx
            .image_ref
            .as_deref()
            .ok_or_else(|| BackendError::Input("mock backend needs an image_ref".into()))?;
        Ok(self.state(id)?)
    }

    /// Injection probability for sentence index `s`.
    pub fn injection_rate(&self, s: usize) -> f64 {
        let rel = s as f64 / self.behavior.sentences_per_caption as f64;
        self.behavior.hallucination_rate.eval(rel.min(1.0))
    }

    fn plan(&self, scene: &SceneState, s: usize, first: TokenId) -> SentencePlan {
        if first == EOS {
            return SentencePlan {
                tokens: vec![EOS],
                slots: vec![],
            };
        }
        if first == PERIOD {
            return SentencePlan {
                tokens: vec![PERIOD],
                slots: vec![],
            };
        }
        let Some(t) = self.vocab.template(first) else {
            return SentencePlan {
                tokens: vec![first, PERIOD],
                slots: vec![],
            };
        };
        let rate = self.injection_rate(s);
        let seed = scene.spec.seed;
        let mut tokens = Vec::with_capacity(t.parts.len());
        let mut slots: Vec<PlannedSlot> = Vec::new();
        let mut slot = 0u64;
        for part in &t.parts {
            match part {
                Part::Word(id) => tokens.push(*id),
                Part::Object => {
                    let key = [seed, s as u64, first as u64, slot];
                    let mut injected = unit(&[key[0], key[1], key[2], key[3], TAG_INJECT]) < rate;
                    if scene.present.is_empty() {
                        injected = true;
                    }
                    if scene.absent.is_empty() {
                        injected = false;
                    }
                    let pool = if injected { &scene.absent } else { &scene.present };
                    let start = mix(&[key[0], key[1], key[2], key[3], TAG_PICK]) as usize % pool.len();
                    // Avoid repeating an object inside one sentence when possible.
                    let object = (0..pool.len())
                        .map(|i| pool[(start + i) % pool.len()])
                        .find(|o| slots.iter().all(|p| p.object != *o))
                        .unwrap_or(pool[start]);
                    slots.push(PlannedSlot {
                        index: tokens.len(),
                        object,
                        injected,
                    });
                    tokens.push(object);
                    slot += 1;
                }
            }
        }
        SentencePlan { tokens, slots }
    }

    /// Plan of sentence `s` of `scene_id` when it starts with `first_word`.
    pub fn sentence_plan(&self, scene_id: &str, s: usize, first_word: &str) -> Result<SentencePlan, MockError> {
        let scene = self.state(scene_id)?;
        let first = self
            .vocab
            .id(first_word)
            .ok_or_else(|| MockError::Config(format!("unknown word {first_word:?}")))?;
        Ok(self.plan(scene, s, first))
    }

    /// Token labels under the sentence/phrase rules, judging each object
    /// token by membership in the scene.
    fn labels(&self, scene: &SceneState, tokens: &[TokenId]) -> Vec<TokenLabel> {
        let mut labels = vec![TokenLabel::Accurate; tokens.len()];
        let mut start = 0;
        while start < tokens.len() {
            let mut end = start;
            while end < tokens.len() && tokens[end] != PERIOD && tokens[end] != EOS {
                end += 1;
            }
            let end = (end + 1).min(tokens.len());
            let sentence = start..end;
            let bad = sentence
                .clone()
                .any(|i| self.vocab.is_object(tokens[i]) && !scene.contains(tokens[i]));
            if bad {
                for l in &mut labels[sentence.clone()] {
                    *l = TokenLabel::Inaccurate;
                }
                for i in sentence.clone() {
                    if self.vocab.is_object(tokens[i]) && scene.contains(tokens[i]) {
                        let mut a = i;
                        while a > sentence.start && !Vocab::is_delimiter(tokens[a - 1]) {
                            a -= 1;
                        }
                        let mut b = i;
                        while b < sentence.end && !Vocab::is_delimiter(tokens[b]) {
                            b += 1;
                        }
                        for l in &mut labels[a..b] {
                            *l = TokenLabel::Accurate;
                        }
                    }
                }
            }
            start = end;
        }
        labels
    }

    /// Sentence index and the tokens of the unfinished sentence.
    fn split_prefix(prefix: &[TokenId]) -> (usize, &[TokenId]) {
        let s = prefix.iter().filter(|&&t| t == PERIOD).count();
        let tail_start = prefix.iter().rposition(|&t| t == PERIOD).map_or(0, |i| i + 1);
        (s, &prefix[tail_start..])
    }

    /// With-image distribution at `prefix`, its argmax target and whether
    /// that target is grounded. Sparse, sorted by probability then id.
    fn step(&self, scene: &SceneState, prefix: &[TokenId]) -> (Vec<(TokenId, f64)>, bool) {
        if prefix.contains(&EOS) {
            return (vec![(EOS, 1.0)], true);
        }
        let (s, partial) = Self::split_prefix(prefix);
        let n = self.behavior.sentences_per_caption;
        let (mut dist, grounded) = if partial.is_empty() {
            let table = if s == 0 {
                &self.opening
            } else if s < n {
                &self.continuation
            } else if s < n + 2 {
                &self.closing
            } else {
                return (vec![(EOS, 1.0)], true);
            };
            let mut dist = table.clone();
            sort_dist(&mut dist);
            let target = dist[0].0;
            let plan = self.plan(scene, s, target);
            let grounded = self.labels(scene, &plan.tokens)[0].is_accurate();
            (dist, grounded)
        } else {
            let plan = self.plan(scene, s, partial[0]);
            let on_plan = partial.len() < plan.tokens.len() && plan.tokens[..partial.len()] == *partial;
            let (target, grounded) = if on_plan {
                let labels = self.labels(scene, &plan.tokens);
                (plan.tokens[partial.len()], labels[partial.len()].is_accurate())
            } else {
                (PERIOD, false)
            };
            let rest = 1.0 - self.behavior.target_mass;
            let mut dist = vec![(target, self.behavior.target_mass)];
            let fillers = self.vocab.fillers();
            let picks = sample(
                &mut ChaCha8Rng::seed_from_u64(mix(&[
                    self.behavior.model_seed,
                    TAG_DISTRACT,
                    target as u64,
                    partial.len() as u64,
                ])),
                fillers.len(),
                3,
            );
            for (w, i) in [0.5, 0.3, 0.2].iter().zip(picks.iter()) {
                dist.push((fillers[i], rest * w));
            }
            sort_dist(&mut dist);
            (dist, grounded)
        };
        dist.retain(|x| x.1 > 0.0);
        (dist, grounded)
    }

    /// Next-token distribution (sparse) with or without the image.
    pub fn next_distribution(
        &self,
        scene_id: &str,
        prefix: &[TokenId],
        with_image: bool,
    ) -> Result<Vec<(TokenId, f64)>, MockError> {
        let scene = self.state(scene_id)?;
        Ok(self.distribution(scene, prefix, with_image))
    }

    fn distribution(&self, scene: &SceneState, prefix: &[TokenId], with_image: bool) -> Vec<(TokenId, f64)> {
        let (mut dist, grounded) = self.step(scene, prefix);
        if !with_image && grounded {
            let inv = 1.0 / self.behavior.image_sharpening;
            let mut total = 0.0;
            for x in &mut dist {
                x.1 = x.1.powf(inv);
                total += x.1;
            }
            for x in &mut dist {
                x.1 /= total;
            }
            sort_dist(&mut dist);
        }
        dist
    }

    fn gaussian(&self, tag: u64, token: u64, position: u64, scale: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.behavior.model_seed, tag, token, position]));
        (0..self.behavior.hidden_dim)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    /// Image-independent component of the hidden state.
    pub fn base_vector(&self, token: TokenId, position: usize) -> Vec<f32> {
        self.gaussian(TAG_BASE, token as u64, position as u64, 1.0)
    }

    /// Direction added for grounded tokens; components ~ N(0, 1/d).
    pub fn signal_direction(&self, token: TokenId) -> Vec<f32> {
        let scale = 1.0 / (self.behavior.hidden_dim as f32).sqrt();
        self.gaussian(TAG_SIGNAL, token as u64, 0, scale)
    }

    /// `base(token, position) + signal * e(token)` when `with_image` and
    /// `grounded`, else the base vector alone.
    pub fn hidden_state_model(&self, token: TokenId, position: usize, grounded: bool, with_image: bool) -> Vec<f32> {
        let mut h = self.base_vector(token, position);
        if with_image && grounded {
            let s = self.behavior.grounded_signal_magnitude as f32;
            for (x, e) in h.iter_mut().zip(self.signal_direction(token)) {
                *x += s * e;
            }
        }
        h
    }

    /// Labels, injected mentions and object set for `tokens` of a scene.
    pub fn export_ground_truth(&self, scene_id: &str, tokens: &[TokenId]) -> Result<GroundTruthExport, MockError> {
        let scene = self.state(scene_id)?;
        let labels = self.labels(scene, tokens);
        let mentions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| self.vocab.is_object(t))
            .map(|(i, &t)| (i, self.vocab.word(t).to_string(), !scene.contains(t)))
            .collect();
        Ok(GroundTruthExport {
            scene_id: scene_id.to_string(),
            labels,
            mentions,
            objects: scene.spec.true_objects.clone(),
        })
    }

    /// The plain greedy caption (until `<eos>` or the cap) with its truth.
    pub fn greedy_caption(&self, scene_id: &str) -> Result<MockCaption, BackendError> {
        let ctx = SequenceContext::caption(scene_id, Vec::new());
        let out = self.greedy_extend(&ctx, &[EOS], true)?;
        let truth = self.export_ground_truth(scene_id, &out.tokens)?;
        Ok(MockCaption {
            scene_id: scene_id.to_string(),
            text: self.detokenize(&out.tokens),
            tokens: out.tokens,
            truth,
        })
    }

    /// Hidden-state pairs of every greedy-caption token with its true label.
    pub fn labeled_pairs(&self, scene_id: &str) -> Result<(Vec<HiddenStatePair>, Vec<TokenLabel>), BackendError> {
        let cap = self.greedy_caption(scene_id)?;
        let ctx = SequenceContext::caption(scene_id, Vec::new());
        let pairs = hidden_state_pairs(self, &ctx, &cap.tokens)?;
        Ok((pairs, cap.truth.labels))
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        crate::text::detokenize(
            tokens
                .iter()
                .map(|&t| if t == EOS { "" } else { self.vocab.word(t) }),
        )
    }

    /// Synthetic detector confidences: high ranges for present objects, low
    /// for absent ones, flipped with probability `detector_noise`.
    pub fn detector_record(&self, scene_id: &str, caption_id: &str, object: &str) -> Result<DetectionScoreRecord, MockError> {
        let scene = self.state(scene_id)?;
        let present = scene.spec.true_objects.contains(object);
        let key = [scene.spec.seed, TAG_DETECT, hash_str(object)];
        let flip = unit(&[key[0], key[1], key[2], 99]) < self.behavior.detector_noise;
        let (lo, hi) = if present != flip { (0.6, 1.0) } else { (0.0, 0.2) };
        let conf = |j: u64| lo + (hi - lo) * unit(&[key[0], key[1], key[2], j]);
        Ok(DetectionScoreRecord {
            caption_id: caption_id.to_string(),
            object: object.to_string(),
            yolo_conf: Some(conf(0)),
            dino_conf: Some(conf(1)),
            tagclip_conf: Some(conf(2)),
            label: Some(present),
        })
    }
}

fn sort_dist(d: &mut [(TokenId, f64)]) {
    d.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Random scenes with `min..=max` true objects drawn from `objects`.
pub fn generate_scenes(g: &SceneGenerator, objects: &[String]) -> Result<Vec<SceneSpec>, MockError> {
    if g.min_objects > g.max_objects || g.max_objects > objects.len() {
        return Err(MockError::Config(format!(
            "cannot draw {}..={} objects from a pool of {}",
            g.min_objects,
            g.max_objects,
            objects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    Ok((0..g.count)
        .map(|i| {
            let n = rand::Rng::gen_range(&mut rng, g.min_objects..=g.max_objects);
            let picked = sample(&mut rng, objects.len(), n);
            let seed = rand::Rng::gen::<u64>(&mut rng);
            SceneSpec::new(
                format!("{}-{i:04}", g.id_prefix),
                picked.iter().map(|j| objects[j].clone()),
                seed,
            )
        })
        .collect())
}

impl LvlmBackend for MockLvlm {
    fn model_info(&self) -> Result<ModelInfo, BackendError> {
        Ok(ModelInfo {
            hidden_dim: self.behavior.hidden_dim,
            vocab: self.vocab.words().to_vec(),
            eos_id: EOS,
            period_id: PERIOD,
            comma_id: COMMA,
            max_sequence_len: MAX_SEQUENCE_LEN,
        })
    }

    fn top_k_next(&self, ctx: &SequenceContext, k: usize, with_image: bool) -> Result<StepResult, BackendError> {
        ctx.validate()?;
        if k == 0 || k > self.vocab.len() {
            return Err(BackendError::Input(format!("k={k} outside 1..={}", self.vocab.len())));
        }
        let scene = self.state_for(ctx)?;
        let prefix = &ctx.prefix_tokens;
        let mut top = self.distribution(scene, prefix, with_image);
        if top.len() < k {
            let support: BTreeSet<TokenId> = top.iter().map(|x| x.0).collect();
            top.extend(
                (0..self.vocab.len() as TokenId)
                    .filter(|t| !support.contains(t))
                    .take(k - top.len())
                    .map(|t| (t, 0.0)),
            );
        }
        top.truncate(k);
        let hidden = match prefix.last() {
            Some(&last) => {
                let labels = self.labels(scene, prefix);
                self.hidden_state_model(last, prefix.len() - 1, labels[prefix.len() - 1].is_accurate(), with_image)
            }
            None => self.gaussian(TAG_BASE, PROMPT_END, 0, 1.0),
        };
        Ok(StepResult { top_tokens: top, hidden })
    }

    fn greedy_extend(
        &self,
        ctx: &SequenceContext,
        stop_tokens: &[TokenId],
        with_image: bool,
    ) -> Result<GreedyOutput, BackendError> {
        ctx.validate()?;
        if !stop_tokens.contains(&EOS) {
            return Err(BackendError::Input("stop tokens must include <eos>".into()));
        }
        let scene = self.state_for(ctx)?;
        let mut seq = ctx.prefix_tokens.clone();
        let start = seq.len();
        loop {
            if seq.len() >= MAX_SEQUENCE_LEN {
                return Ok(GreedyOutput {
                    tokens: seq[start..].to_vec(),
                    truncated: true,
                });
            }
            let next = self.distribution(scene, &seq, with_image)[0].0;
            seq.push(next);
            if stop_tokens.contains(&next) {
                return Ok(GreedyOutput {
                    tokens: seq[start..].to_vec(),
                    truncated: false,
                });
            }
        }
    }

    fn final_hidden_states(
        &self,
        ctx: &SequenceContext,
        tokens: &[TokenId],
        with_image: bool,
    ) -> Result<Vec<Vec<f32>>, BackendError> {
        ctx.validate()?;
        if tokens.is_empty() {
            return Err(BackendError::Input("hidden_states needs at least one token".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(BackendError::Input(format!("token {t} outside vocabulary")));
        }
        let scene = self.state_for(ctx)?;
        let mut seq = ctx.prefix_tokens.clone();
        seq.extend_from_slice(tokens);
        let labels = self.labels(scene, &seq);
        let base = ctx.prefix_tokens.len();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.hidden_state_model(t, base + i, labels[base + i].is_accurate(), with_image))
            .collect())
    }

    fn discriminative_reply(&self, image_ref: &str, object_name: &str, _question: &str) -> Result<String, BackendError> {
        let scene = self.state(image_ref)?;
        let o = object_name.trim().to_lowercase();
        Ok(if scene.spec.true_objects.contains(&o) { "Yes" } else { "No" }.to_string())
    }
}

#[cfg(test)]
mod tests;
