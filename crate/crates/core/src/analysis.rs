//! Diagnostics: how much the image changes next-token distributions along
//! a caption, where INACCURATE tokens sit by relative position, and whether
//! the model's yes/no answers agree with the objects it mentions.

use crate::fusion::{predict_p_exist, DetectionScoreRecord, FusionModel};
use crate::protocol::{BackendError, LvlmBackend, SequenceContext};
use crate::text::{TokenId, TokenLabel};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn normalized(p: &[f64], name: &str) -> Result<Vec<f64>, AnalysisError> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(AnalysisError::Input(format!("{name} has invalid mass {v}")));
    }
    let s: f64 = p.iter().sum();
    if !(s > 0.0) {
        return Err(AnalysisError::Input(format!("{name} has no mass")));
    }
    if (s - 1.0).abs() > 1e-6 {
        tracing::debug!(sum = s, "renormalizing {name}");
    }
    Ok(p.iter().map(|v| v / s).collect())
}

/// Jensen-Shannon divergence with base-2 logarithms, so it lies in `[0, 1]`.
/// Shorter inputs are padded with zeros.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, AnalysisError> {
    let n = p.len().max(q.len());
    let mut p = normalized(p, "p")?;
    let mut q = normalized(q, "q")?;
    p.resize(n, 0.0);
    q.resize(n, 0.0);
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        // Summing both terms per coordinate keeps jsd(p, q) == jsd(q, p).
        let ka = if a > 0.0 { a * (a / m).log2() } else { 0.0 };
        let kb = if b > 0.0 { b * (b / m).log2() } else { 0.0 };
        acc += if ka <= kb { ka + kb } else { kb + ka };
    }
    Ok((0.5 * acc).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    pub tokens: Vec<TokenId>,
    pub jsd: Vec<f64>,
    pub prob_with_image: Vec<f64>,
    pub prob_without_image: Vec<f64>,
    pub log_base: u32,
}

/// Dense next-token distribution at `ctx` over the whole vocabulary.
fn dense<B: LvlmBackend + ?Sized>(backend: &B, ctx: &SequenceContext, vocab: usize, with_image: bool) -> Result<Vec<f64>, BackendError> {
    let step = backend.top_k_next(ctx, vocab, with_image)?;
    let mut out = vec![0.0; vocab];
    for (t, p) in step.top_tokens {
        let slot = out
            .get_mut(t as usize)
            .ok_or_else(|| BackendError::Protocol(format!("token id {t} outside vocabulary")))?;
        *slot = p;
    }
    Ok(out)
}

/// Forces `tokens` through the backend and compares, at every step, the
/// distributions with and without the image.
pub fn divergence_profile<B: LvlmBackend + ?Sized>(
    backend: &B,
    image_ref: &str,
    tokens: &[TokenId],
) -> Result<DivergenceProfile, AnalysisError> {
    let vocab = backend.model_info()?.vocab_size();
    let mut out = DivergenceProfile {
        tokens: tokens.to_vec(),
        jsd: Vec::with_capacity(tokens.len()),
        prob_with_image: Vec::with_capacity(tokens.len()),
        prob_without_image: Vec::with_capacity(tokens.len()),
        log_base: 2,
    };
    for (i, &t) in tokens.iter().enumerate() {
        let ctx = SequenceContext::caption(image_ref, tokens[..i].to_vec());
        let p = dense(backend, &ctx, vocab, true)?;
        let q = dense(backend, &ctx, vocab, false)?;
        out.jsd.push(jsd(&p, &q)?);
        out.prob_with_image.push(p.get(t as usize).copied().unwrap_or(0.0));
        out.prob_without_image.push(q.get(t as usize).copied().unwrap_or(0.0));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionHistogram {
    pub bins: usize,
    pub counts: Vec<usize>,
    pub accurate: Vec<f64>,
    pub inaccurate: Vec<f64>,
}

/// Buckets every token by `index / caption length` into `bins` equal,
/// left-closed bins and reports the label mix of each bin. Empty bins
/// report zero for both classes.
pub fn position_histogram<S: AsRef<[TokenLabel]>>(captions: &[S], bins: usize) -> Result<PositionHistogram, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::Input("need at least one bin".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut bad = vec![0usize; bins];
    for labels in captions {
        let labels = labels.as_ref();
        let n = labels.len();
        for (i, l) in labels.iter().enumerate() {
            // Integer arithmetic avoids rounding at bin edges.
            let b = (i * bins / n).min(bins - 1);
            counts[b] += 1;
            if !l.is_accurate() {
                bad[b] += 1;
            }
        }
    }
    let inaccurate: Vec<f64> = counts
        .iter()
        .zip(&bad)
        .map(|(&c, &b)| if c == 0 { 0.0 } else { b as f64 / c as f64 })
        .collect();
    let accurate = counts
        .iter()
        .zip(&inaccurate)
        .map(|(&c, &f)| if c == 0 { 0.0 } else { 1.0 - f })
        .collect();
    Ok(PositionHistogram {
        bins,
        counts,
        accurate,
        inaccurate,
    })
}

/// A caption's image and the object names it mentions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionMentions {
    pub caption_id: String,
    pub image_ref: String,
    pub objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub caption_id: String,
    pub object: String,
    /// `None` when the reply could not be parsed.
    pub answer: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_exist: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub records: Vec<ConsistencyRecord>,
    pub answered: usize,
    pub failed: usize,
    /// Share of answered mentions the model denies.
    pub no_rate: f64,
    pub p_exist_yes: Vec<f64>,
    pub p_exist_no: Vec<f64>,
}

/// Asks the backend whether each mentioned object is in the image.
pub fn consistency_study<B: LvlmBackend + ?Sized>(
    backend: &B,
    captions: &[CaptionMentions],
    model: &FusionModel,
    scores: &[DetectionScoreRecord],
) -> Result<ConsistencyReport, AnalysisError> {
    let mut report = ConsistencyReport {
        records: Vec::new(),
        answered: 0,
        failed: 0,
        no_rate: 0.0,
        p_exist_yes: Vec::new(),
        p_exist_no: Vec::new(),
    };
    let mut no = 0usize;
    for c in captions {
        for object in &c.objects {
            let p_exist = scores
                .iter()
                .find(|s| s.caption_id == c.caption_id && s.object == *object)
                .and_then(|s| predict_p_exist(model, s).ok());
            let (answer, error) = match backend.discriminative_query(&c.image_ref, object) {
                Ok(a) => (Some(a), None),
                Err(e @ BackendError::Parse { .. }) => (None, Some(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            match answer {
                Some(a) => {
                    report.answered += 1;
                    if !a {
                        no += 1;
                    }
                    if let Some(p) = p_exist {
                        if a { &mut report.p_exist_yes } else { &mut report.p_exist_no }.push(p);
                    }
                }
                None => report.failed += 1,
            }
            report.records.push(ConsistencyRecord {
                caption_id: c.caption_id.clone(),
                object: object.clone(),
                answer,
                error,
                p_exist,
            });
        }
    }
    if report.answered > 0 {
        report.no_rate = no as f64 / report.answered as f64;
    }
    Ok(report)
}

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n{body}</svg>\n",
        y0 = H - PAD,
        x1 = W - PAD,
    );
    s
}

/// Line plot of per-position JSD.
pub fn profile_svg(p: &DivergenceProfile) -> String {
    let n = p.jsd.len().max(2) - 1;
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let pts: Vec<String> = p
        .jsd
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.1},{:.1}", PAD + pw * i as f64 / n as f64, H - PAD - ph * v))
        .collect();
    let body = format!("<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "));
    svg_frame("JSD with vs without image, per token", &body)
}

/// Stacked bars: INACCURATE share on top of ACCURATE share per bin.
pub fn histogram_svg(h: &PositionHistogram) -> String {
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let bw = pw / h.bins as f64;
    let mut body = String::new();
    for i in 0..h.bins {
        let x = PAD + bw * i as f64;
        let a = ph * h.accurate[i];
        let b = ph * h.inaccurate[i];
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{a:.1}\" fill=\"seagreen\"/>",
            H - PAD - a,
            bw * 0.9
        );
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{b:.1}\" fill=\"firebrick\"/>",
            H - PAD - a - b,
            bw * 0.9
        );
    }
    svg_frame("Label proportion by relative token position", &body)
}
