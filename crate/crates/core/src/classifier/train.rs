//! Fold-wise training: seeded train/val/test split, k-fold over the train
//! split, AdamW with reduce-on-plateau driven by validation loss.

use super::mlp::{bce_with_logits, Mlp};
use super::optim::{AdamParams, AdamW, Optimizer, ReduceOnPlateau};
use super::{ClassifierError, Dataset, EvalReport, FeatureMode, MlpEnsemble};
use crate::fusion::kfold_ranges;
use crate::text::TokenLabel;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub folds: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 512,
            epochs: 40,
            plateau_factor: 0.1,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            folds: 5,
            split: [0.6, 0.2, 0.2],
            seed: 0,
            hidden: vec![256, 128, 64],
            dropout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Input(m.to_string()));
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("lr must be positive, weight_decay non-negative, plateau_factor in (0, 1)");
        }
        if self.batch_size < 2 || self.epochs == 0 || self.plateau_patience == 0 || self.folds < 2 {
            return bad("batch_size >= 2, epochs >= 1, patience >= 1 and folds >= 2 required");
        }
        if self.split.iter().any(|&s| !(s > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be positive and sum to 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("hidden dimensions must be non-empty and positive, dropout in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub fold: usize,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr: Vec<f64>,
    pub skipped_batches: usize,
    /// Metrics on the held-out fold.
    pub cv: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: FeatureMode,
    pub config: TrainConfig,
    pub splits: SplitSizes,
    pub folds: Vec<FoldHistory>,
    /// Ensemble metrics on the test split.
    pub test: EvalReport,
}

fn targets(labels: &[TokenLabel]) -> Array1<f32> {
    labels.iter().map(|l| if l.is_accurate() { 0.0 } else { 1.0 }).collect()
}

fn eval_loss(net: &Mlp<f32>, x: &Array2<f32>, y: &Array1<f32>) -> Result<f64, ClassifierError> {
    let logits = net.forward_eval(x.view())?;
    Ok(bce_with_logits(logits.view(), y.view()).0 as f64)
}

/// Trains one model per fold of the train split and returns their
/// ensemble with the per-fold histories and test metrics.
pub fn train(data: &Dataset, mode: FeatureMode, config: &TrainConfig) -> Result<(MlpEnsemble, TrainReport), ClassifierError> {
    config.validate()?;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_train = (n as f64 * config.split[0]).round() as usize;
    let n_val = (n as f64 * config.split[1]).round() as usize;
    if n_train < config.folds * 2 || n_val == 0 || n_train + n_val >= n {
        return Err(ClassifierError::Input(format!("{n} rows are too few for the requested split")));
    }
    let train_set = data.subset(&order[..n_train]);
    let val_set = data.subset(&order[n_train..n_train + n_val]);
    let test_set = data.subset(&order[n_train + n_val..]);
    let bad = train_set.inaccurate_count();
    if bad == 0 || bad == train_set.len() {
        return Err(ClassifierError::Input("training split must contain both classes".into()));
    }

    // Standardization statistics from the train split only.
    let d = data.dim;
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for i in 0..train_set.len() {
        for (j, &v) in train_set.row(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let m = train_set.len() as f64;
    let mean32: Vec<f32> = mean.iter().map(|s| (s / m) as f32).collect();
    let std32: Vec<f32> = mean
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / m - (s / m).powi(2)).max(0.0);
            let sd = var.sqrt() as f32;
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let scaler = MlpEnsemble {
        mode,
        mean: mean32.clone(),
        std: std32.clone(),
        members: Vec::new(),
        threshold: 0.5,
    };
    let x_train = scaler.standardize(&train_set.features, train_set.len());
    let y_train = targets(&train_set.labels);
    let x_val = scaler.standardize(&val_set.features, val_set.len());
    let y_val = targets(&val_set.labels);

    let mut members = Vec::with_capacity(config.folds);
    let mut histories = Vec::with_capacity(config.folds);
    for (fold, held) in kfold_ranges(n_train, config.folds).into_iter().enumerate() {
        let seed = config.seed.wrapping_add(1 + fold as u64);
        let fit_idx: Vec<usize> = (0..n_train).filter(|i| !held.contains(i)).collect();
        let (net, mut history) = train_fold(&x_train, &y_train, &fit_idx, &x_val, &y_val, config, fold, seed)?;
        let held_idx: Vec<usize> = held.collect();
        let one = MlpEnsemble {
            members: vec![net],
            ..scaler.clone()
        };
        history.cv = one.evaluate(&train_set.subset(&held_idx))?;
        tracing::info!(fold, val_loss = history.val_loss.last().copied(), "fold trained");
        members.push(one.members.into_iter().next().expect("one member"));
        histories.push(history);
    }
    let ensemble = MlpEnsemble::new(mode, mean32, std32, members)?;
    let test = ensemble.evaluate(&test_set)?;
    let report = TrainReport {
        mode,
        config: config.clone(),
        splits: SplitSizes {
            train: n_train,
            val: n_val,
            test: test_set.len(),
        },
        folds: histories,
        test,
    };
    Ok((ensemble, report))
}

#[allow(clippy::too_many_arguments)]
fn train_fold(
    x: &Array2<f32>,
    y: &Array1<f32>,
    fit_idx: &[usize],
    x_val: &Array2<f32>,
    y_val: &Array1<f32>,
    config: &TrainConfig,
    fold: usize,
    seed: u64,
) -> Result<(Mlp<f32>, FoldHistory), ClassifierError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::<f32>::new(x.ncols(), &config.hidden, config.dropout, &mut rng);
    let mut opt = AdamW::<f32>::new(AdamParams {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamParams::default()
    });
    let mut sched = ReduceOnPlateau::new(config.plateau_factor, config.plateau_patience, config.plateau_threshold);
    let mut history = FoldHistory {
        fold,
        seed,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        lr: Vec::new(),
        skipped_batches: 0,
        cv: EvalReport::from_confusion(Default::default()),
    };
    let mut idx = fit_idx.to_vec();
    for epoch in 1..=config.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for batch in idx.chunks(config.batch_size) {
            if batch.len() < 2 {
                // Batch statistics are undefined for a single row.
                tracing::warn!(fold, epoch, "skipping final batch of size 1");
                history.skipped_batches += 1;
                continue;
            }
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let masks = net.sample_masks(batch.len(), &mut rng);
            let (logits, cache) = net.forward_train(xb.view(), &masks);
            let (loss, dl) = bce_with_logits(logits.view(), yb.view());
            if !loss.is_finite() {
                return Err(ClassifierError::Training {
                    fold,
                    epoch,
                    message: "training loss is not finite".into(),
                });
            }
            total += loss as f64 * batch.len() as f64;
            seen += batch.len();
            let grads = net.backward(&cache, dl.view());
            net.update_running(batch.len(), &cache.batch_stats);
            opt.step(net.params_mut(), grads.tensors());
        }
        let val = eval_loss(&net, x_val, y_val).map_err(|e| ClassifierError::Training {
            fold,
            epoch,
            message: e.to_string(),
        })?;
        if !val.is_finite() {
            return Err(ClassifierError::Training {
                fold,
                epoch,
                message: "validation loss is not finite".into(),
            });
        }
        history.train_loss.push(total / seen.max(1) as f64);
        history.val_loss.push(val);
        history.lr.push(opt.lr());
        let next = sched.step(val, opt.lr());
        opt.set_lr(next);
    }
    Ok((net, history))
}
