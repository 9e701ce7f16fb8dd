//! Object-existence probability from three open-vocabulary detector
//! confidences, and a logistic-regression trainer with k-fold
//! cross-validation for the fusion weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Existence label encoding: accurate = 1, inaccurate = 0.
mod label01 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(u8::from(*b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        let v: Option<u8> = Option::deserialize(d)?;
        match v {
            None => Ok(None),
            Some(0) => Ok(Some(false)),
            Some(1) => Ok(Some(true)),
            Some(x) => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {x}"))),
        }
    }
}

/// Detector confidences for one object mentioned in one caption. A `None`
/// confidence marks a partial record (that detector produced nothing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScoreRecord {
    pub caption_id: String,
    pub object: String,
    pub yolo_conf: Option<f64>,
    pub dino_conf: Option<f64>,
    pub tagclip_conf: Option<f64>,
    #[serde(default, with = "label01", skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

impl DetectionScoreRecord {
    pub fn new(caption_id: &str, object: &str, confs: [f64; 3], label: Option<bool>) -> Self {
        Self {
            caption_id: caption_id.to_string(),
            object: object.to_string(),
            yolo_conf: Some(confs[0]),
            dino_conf: Some(confs[1]),
            tagclip_conf: Some(confs[2]),
            label,
        }
    }

    pub fn is_partial(&self) -> bool {
        self.yolo_conf.is_none() || self.dino_conf.is_none() || self.tagclip_conf.is_none()
    }

    /// `[yolo, dino, tagclip]`, validated to be finite and in `[0, 1]`.
    pub fn confidences(&self) -> Result<[f64; 3], FusionError> {
        let (Some(y), Some(d), Some(t)) = (self.yolo_conf, self.dino_conf, self.tagclip_conf) else {
            return Err(FusionError::Input(format!(
                "record {}/{} is partial",
                self.caption_id, self.object
            )));
        };
        let c = [y, d, t];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::Input(format!(
                "record {}/{} has a non-finite confidence",
                self.caption_id, self.object
            )));
        }
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FusionError::Input(format!(
                "record {}/{} has a confidence outside [0,1]",
                self.caption_id, self.object
            )));
        }
        Ok(c)
    }
}

/// `logit(p_exist) = intercept + w_yolo*yolo + w_dino*dino + w_tag*tagclip`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub intercept: f64,
    pub w_yolo: f64,
    pub w_dino: f64,
    pub w_tag: f64,
}

impl FusionModel {
    /// Reference weights fitted on a class-balanced object set.
    pub const PUBLISHED: FusionModel = FusionModel {
        intercept: -1.7251,
        w_yolo: 2.6723,
        w_dino: 1.6066,
        w_tag: 2.2660,
    };

    pub const ZERO: FusionModel = FusionModel {
        intercept: 0.0,
        w_yolo: 0.0,
        w_dino: 0.0,
        w_tag: 0.0,
    };

    pub fn from_params(p: [f64; 4]) -> Self {
        Self {
            intercept: p[0],
            w_yolo: p[1],
            w_dino: p[2],
            w_tag: p[3],
        }
    }

    pub fn params(&self) -> [f64; 4] {
        [self.intercept, self.w_yolo, self.w_dino, self.w_tag]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn logit(&self, conf: [f64; 3]) -> f64 {
        self.intercept + self.w_yolo * conf[0] + self.w_dino * conf[1] + self.w_tag * conf[2]
    }
}

impl Default for FusionModel {
    fn default() -> Self {
        Self::PUBLISHED
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn predict_p_exist(model: &FusionModel, rec: &DetectionScoreRecord) -> Result<f64, FusionError> {
    if !model.is_finite() {
        return Err(FusionError::Input("fusion model has non-finite parameters".into()));
    }
    Ok(sigmoid(model.logit(rec.confidences()?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectVerdict {
    Accurate,
    Inaccurate,
}

/// Accurate iff `p_exist >= threshold`.
pub fn classify_object(p_exist: f64, threshold: f64) -> ObjectVerdict {
    if p_exist >= threshold {
        ObjectVerdict::Accurate
    } else {
        ObjectVerdict::Inaccurate
    }
}

/// Design matrix row `[1, yolo, dino, tagclip]` with its 0/1 target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub x: [f64; 4],
    pub y: f64,
}

impl Sample {
    pub fn new(conf: [f64; 3], label: bool) -> Self {
        Self {
            x: [1.0, conf[0], conf[1], conf[2]],
            y: if label { 1.0 } else { 0.0 },
        }
    }
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Mean log-likelihood and its gradient in one pass.
pub fn log_likelihood_and_gradient(beta: &[f64; 4], data: &[Sample]) -> (f64, [f64; 4]) {
    let mut ll = 0.0;
    let mut g = [0.0; 4];
    for d in data {
        let z = dot(beta, &d.x);
        // e = exp(-|z|) gives both softplus(z) and sigmoid(z) stably.
        let e = (-z.abs()).exp();
        let softplus = z.max(0.0) + e.ln_1p();
        let p = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        ll += d.y * z - softplus;
        let r = d.y - p;
        for j in 0..4 {
            g[j] += r * d.x[j];
        }
    }
    let n = data.len() as f64;
    (ll / n, g.map(|v| v / n))
}

/// Mean log-likelihood.
pub fn log_likelihood(beta: &[f64; 4], data: &[Sample]) -> f64 {
    let s: f64 = data
        .iter()
        .map(|d| {
            let z = dot(beta, &d.x);
            d.y * z - softplus(z)
        })
        .sum();
    s / data.len() as f64
}

/// Gradient of [`log_likelihood`].
pub fn gradient(beta: &[f64; 4], data: &[Sample]) -> [f64; 4] {
    log_likelihood_and_gradient(beta, data).1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub params: [f64; 4],
    pub iterations: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
}

/// Full-batch gradient ascent on the mean log-likelihood with Armijo
/// backtracking. Every iteration starts from the step `1/L`, where `L` is
/// the trace bound on the gradient's Lipschitz constant. Stops when the
/// gradient norm drops below `tol` or after `max_iter` iterations.
pub fn fit_logistic(data: &[Sample], max_iter: usize, tol: f64) -> FitOutcome {
    let trace: f64 = data.iter().map(|d| dot(&d.x, &d.x)).sum::<f64>() / data.len() as f64;
    let initial_step = 4.0 / trace;
    let mut beta = [0.0; 4];
    let (mut ll, mut g) = log_likelihood_and_gradient(&beta, data);
    let norm2 = |g: &[f64; 4]| g.iter().map(|v| v * v).sum::<f64>();
    let mut it = 0;
    while it < max_iter && norm2(&g).sqrt() >= tol {
        it += 1;
        let gn2 = norm2(&g);
        let mut step = initial_step;
        let accepted = loop {
            let cand = [
                beta[0] + step * g[0],
                beta[1] + step * g[1],
                beta[2] + step * g[2],
                beta[3] + step * g[3],
            ];
            let (cll, cg) = log_likelihood_and_gradient(&cand, data);
            // Near the optimum the gain drops below f64 resolution of the
            // objective; allow for that rounding so the gradient keeps shrinking.
            let slack = 4.0 * f64::EPSILON * (data.len() as f64).sqrt() * (1.0 + ll.abs());
            if cll - ll >= 1e-4 * step * gn2 - slack {
                beta = cand;
                ll = cll;
                g = cg;
                break true;
            }
            step *= 0.5;
            if step < 1e-20 {
                break false;
            }
        };
        if !accepted {
            break;
        }
    }
    let gnorm = norm2(&g).sqrt();
    FitOutcome {
        params: beta,
        iterations: it,
        converged: gnorm < tol,
        final_gradient_norm: gnorm,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFusionConfig {
    pub folds: usize,
    pub downsample: bool,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TrainFusionConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            downsample: true,
            seed: 0,
            max_iter: 1000,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fit: FitOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label0: usize,
    pub label1: usize,
    pub used: usize,
    pub excluded_partial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainReport {
    pub model: FusionModel,
    pub fit: FitOutcome,
    pub folds: Vec<FoldMetrics>,
    pub cv: CvSummary,
    pub counts: ClassCounts,
    pub config: TrainFusionConfig,
}

fn binary_metrics(params: &[f64; 4], data: &[Sample]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for d in data {
        let pred = sigmoid(dot(params, &d.x)) >= 0.5;
        match (pred, d.y > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let acc = (tp + tn) as f64 / data.len().max(1) as f64;
    let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let rec = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    (acc, prec, rec)
}

/// Contiguous k-fold split of `0..n` (first `n % k` folds one larger).
pub fn kfold_ranges(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Fits the fusion model on labeled, non-partial records and reports
/// k-fold cross-validated accuracy, precision and recall (positive class:
/// accurate). The returned model is refit on all used records.
pub fn train_fusion(records: &[DetectionScoreRecord], cfg: &TrainFusionConfig) -> Result<FusionTrainReport, FusionError> {
    if cfg.folds < 2 {
        return Err(FusionError::Training("need at least 2 folds".into()));
    }
    let mut excluded_partial = 0;
    let mut samples = Vec::new();
    for r in records {
        let Some(label) = r.label else { continue };
        if r.is_partial() {
            excluded_partial += 1;
            continue;
        }
        samples.push(Sample::new(r.confidences()?, label));
    }
    let label1 = samples.iter().filter(|s| s.y > 0.5).count();
    let label0 = samples.len() - label1;
    if label0 < 2 || label1 < 2 {
        return Err(FusionError::Training(format!(
            "need at least 2 records per class, have {label0} inaccurate / {label1} accurate"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    samples.shuffle(&mut rng);
    if cfg.downsample {
        let n = label0.min(label1);
        let (mut k0, mut k1) = (0, 0);
        samples.retain(|s| {
            let slot = if s.y > 0.5 { &mut k1 } else { &mut k0 };
            *slot += 1;
            *slot <= n
        });
    }
    if samples.len() < cfg.folds {
        return Err(FusionError::Training(format!(
            "{} records cannot fill {} folds",
            samples.len(),
            cfg.folds
        )));
    }

    let folds: Vec<FoldMetrics> = kfold_ranges(samples.len(), cfg.folds)
        .into_iter()
        .enumerate()
        .map(|(i, test)| {
            let train: Vec<Sample> = samples[..test.start]
                .iter()
                .chain(&samples[test.end..])
                .copied()
                .collect();
            let held = &samples[test.clone()];
            let fit = fit_logistic(&train, cfg.max_iter, cfg.tol);
            let (train_accuracy, _, _) = binary_metrics(&fit.params, &train);
            let (accuracy, precision, recall) = binary_metrics(&fit.params, held);
            FoldMetrics {
                fold: i,
                n_train: train.len(),
                n_test: held.len(),
                train_accuracy,
                accuracy,
                precision,
                recall,
                fit,
            }
        })
        .collect();
    let col = |f: fn(&FoldMetrics) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
    let cv = CvSummary {
        accuracy: col(|f| f.accuracy),
        precision: col(|f| f.precision),
        recall: col(|f| f.recall),
    };
    let fit = fit_logistic(&samples, cfg.max_iter, cfg.tol);
    let model = FusionModel::from_params(fit.params);
    if !model.is_finite() {
        return Err(FusionError::Training("fit produced non-finite parameters".into()));
    }
    let used = samples.len();
    Ok(FusionTrainReport {
        model,
        fit,
        folds,
        cv,
        counts: ClassCounts {
            label0,
            label1,
            used,
            excluded_partial,
        },
        config: cfg.clone(),
    })
}

/// Records drawn from `model`: confidences i.i.d. Beta(0.5, 0.5) (mass near
/// 0 and 1, like real detector scores), labels ~ Bernoulli(p_exist).
pub fn synthetic_records(model: &FusionModel, n: usize, seed: u64) -> Vec<DetectionScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(0.5, 0.5).expect("valid beta");
    (0..n)
        .map(|i| {
            let c = [beta.sample(&mut rng), beta.sample(&mut rng), beta.sample(&mut rng)];
            let p = sigmoid(model.logit(c));
            let label = Bernoulli::new(p).expect("p in [0,1]").sample(&mut rng);
            DetectionScoreRecord::new(&format!("synthetic-{i}"), "object", c, Some(label))
        })
        .collect()
}

/// On-disk form of a fusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModelFile {
    pub intercept: f64,
    /// `[yolo, dino, tagclip]`.
    pub weights: [f64; 3],
    pub metadata: FusionMetadata,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionMetadata {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub counts: Option<ClassCounts>,
    pub cv: Option<CvSummary>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

impl FusionModelFile {
    pub fn from_report(r: &FusionTrainReport) -> Self {
        Self {
            intercept: r.model.intercept,
            weights: [r.model.w_yolo, r.model.w_dino, r.model.w_tag],
            metadata: FusionMetadata {
                seed: Some(r.config.seed),
                folds: Some(r.config.folds),
                counts: Some(r.counts.clone()),
                cv: Some(r.cv.clone()),
                iterations: Some(r.fit.iterations),
                converged: Some(r.fit.converged),
            },
        }
    }

    pub fn published() -> Self {
        let m = FusionModel::PUBLISHED;
        Self {
            intercept: m.intercept,
            weights: [m.w_yolo, m.w_dino, m.w_tag],
            metadata: FusionMetadata::default(),
        }
    }

    pub fn model(&self) -> FusionModel {
        FusionModel {
            intercept: self.intercept,
            w_yolo: self.weights[0],
            w_dino: self.weights[1],
            w_tag: self.weights[2],
        }
    }
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DetectionScoreRecord>, FusionError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FusionError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[DetectionScoreRecord]) -> Result<(), FusionError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| FusionError::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
