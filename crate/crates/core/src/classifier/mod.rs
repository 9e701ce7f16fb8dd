//! Token-level hallucination classifier: an MLP over hidden-state features,
//! trained per fold and averaged into an ensemble.

mod dataset;
mod metrics;
mod mlp;
mod optim;
mod train;

pub use dataset::{build_features, Dataset, DatasetError, FeatureMode};
pub use metrics::{ClassMetrics, Confusion, EvalReport};
pub use mlp::{bce_with_logits, sigmoid, BatchNorm, Grads, Layer, LayerGrad, Mlp, MlpError, Real};
pub use optim::{Adam, AdamParams, AdamW, Optimizer, ReduceOnPlateau};
pub use train::{train, FoldHistory, SplitSizes, TrainConfig, TrainReport};

use crate::protocol::wire::{decode_f32, encode_f32};
use crate::protocol::HiddenStatePair;
use crate::text::TokenLabel;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Numeric(#[from] MlpError),
    #[error("training diverged in fold {fold} at epoch {epoch}: {message}")]
    Training { fold: usize, epoch: usize, message: String },
    #[error("model format error: {0}")]
    Format(String),
}

impl From<DatasetError> for ClassifierError {
    fn from(e: DatasetError) -> Self {
        ClassifierError::Input(e.to_string())
    }
}

/// Anything that labels the tokens behind a run of hidden-state pairs.
pub trait TokenClassifier {
    /// Expected hidden size, if the classifier has one.
    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn classify(&self, pairs: &[HiddenStatePair]) -> Result<Vec<TokenLabel>, ClassifierError>;
}

/// Labels every token ACCURATE.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlwaysAccurate;

impl TokenClassifier for AlwaysAccurate {
    fn classify(&self, pairs: &[HiddenStatePair]) -> Result<Vec<TokenLabel>, ClassifierError> {
        Ok(vec![TokenLabel::Accurate; pairs.len()])
    }
}

/// Fold models in eval mode. Inputs are standardized with the stored
/// statistics, member probabilities are averaged, and a token is
/// INACCURATE when the average exceeds `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEnsemble {
    pub mode: FeatureMode,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub members: Vec<Mlp<f32>>,
    pub threshold: f64,
}

impl MlpEnsemble {
    pub fn new(mode: FeatureMode, mean: Vec<f32>, std: Vec<f32>, members: Vec<Mlp<f32>>) -> Result<Self, ClassifierError> {
        let Some(first) = members.first() else {
            return Err(ClassifierError::Input("ensemble needs at least one member".into()));
        };
        let d = first.input_dim();
        if members.iter().any(|m| m.input_dim() != d) || mean.len() != d || std.len() != d {
            return Err(ClassifierError::Input("ensemble members disagree on input dimension".into()));
        }
        Ok(Self {
            mode,
            mean,
            std,
            members,
            threshold: 0.5,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn standardize(&self, rows: &[f32], n: usize) -> Array2<f32> {
        let d = self.input_dim();
        Array2::from_shape_fn((n, d), |(i, j)| (rows[i * d + j] - self.mean[j]) / self.std[j])
    }

    /// Averaged hallucination probability per row of `features`.
    pub fn predict_proba(&self, features: &[f32]) -> Result<Array1<f64>, ClassifierError> {
        let d = self.input_dim();
        if d == 0 || features.len() % d != 0 {
            return Err(ClassifierError::Input(format!("{} values are not rows of dimension {d}", features.len())));
        }
        let x = self.standardize(features, features.len() / d);
        let mut acc = Array1::<f64>::zeros(x.nrows());
        for m in &self.members {
            let logits = m.forward_eval(x.view())?;
            acc.zip_mut_with(&logits, |a, &z| *a += sigmoid(z as f64));
        }
        Ok(acc / self.members.len() as f64)
    }

    pub fn predict(&self, features: &[f32]) -> Result<Vec<TokenLabel>, ClassifierError> {
        Ok(self
            .predict_proba(features)?
            .iter()
            .map(|&p| if p > self.threshold { TokenLabel::Inaccurate } else { TokenLabel::Accurate })
            .collect())
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport, ClassifierError> {
        let pred = self.predict(&data.features)?;
        Ok(EvalReport::evaluate(&data.labels, &pred))
    }

    pub fn to_file(&self) -> EnsembleFile {
        EnsembleFile {
            mode: self.mode,
            input_dim: self.input_dim(),
            threshold: self.threshold,
            mean: encode_f32(&self.mean),
            std: encode_f32(&self.std),
            members: self.members.iter().map(MemberFile::from_mlp).collect(),
        }
    }

    pub fn from_file(f: &EnsembleFile) -> Result<Self, ClassifierError> {
        let dec = |s: &str| decode_f32(s).map_err(|e| ClassifierError::Format(e.to_string()));
        let members = f.members.iter().map(|m| m.to_mlp(f.input_dim)).collect::<Result<Vec<_>, _>>()?;
        let mut e = Self::new(f.mode, dec(&f.mean)?, dec(&f.std)?, members)?;
        e.threshold = f.threshold;
        Ok(e)
    }
}

impl TokenClassifier for MlpEnsemble {
    fn input_dim(&self) -> Option<usize> {
        Some(MlpEnsemble::input_dim(self))
    }

    fn classify(&self, pairs: &[HiddenStatePair]) -> Result<Vec<TokenLabel>, ClassifierError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut rows = Vec::with_capacity(pairs.len() * self.input_dim());
        for p in pairs {
            if p.x1.len() != self.input_dim() || p.x2.len() != self.input_dim() {
                return Err(ClassifierError::Numeric(MlpError::InputDim {
                    expected: self.input_dim(),
                    got: p.x1.len(),
                }));
            }
            rows.extend(self.mode.row(p));
        }
        self.predict(&rows)
    }
}

/// JSON form of an ensemble; arrays are base64 little-endian `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub mode: FeatureMode,
    pub input_dim: usize,
    pub threshold: f64,
    pub mean: String,
    pub std: String,
    pub members: Vec<MemberFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberFile {
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub layers: Vec<LayerFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    /// `(in, out)`, row-major.
    pub shape: [usize; 2],
    pub weight: String,
    pub bias: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNormFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormFile {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

fn enc(a: &Array1<f32>) -> String {
    encode_f32(&a.to_vec())
}

impl MemberFile {
    fn from_mlp(m: &Mlp<f32>) -> Self {
        Self {
            dropout: m.dropout,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    shape: [l.w.nrows(), l.w.ncols()],
                    weight: encode_f32(&l.w.iter().copied().collect::<Vec<_>>()),
                    bias: enc(&l.b),
                    batch_norm: l.bn.as_ref().map(|bn| BatchNormFile {
                        gamma: enc(&bn.gamma),
                        beta: enc(&bn.beta),
                        running_mean: enc(&bn.running_mean),
                        running_var: enc(&bn.running_var),
                    }),
                })
                .collect(),
        }
    }

    fn to_mlp(&self, input_dim: usize) -> Result<Mlp<f32>, ClassifierError> {
        let bad = |m: String| ClassifierError::Format(m);
        let vec = |s: &str, n: usize, what: &str| -> Result<Array1<f32>, ClassifierError> {
            let v = decode_f32(s).map_err(|e| bad(e.to_string()))?;
            if v.len() != n {
                return Err(bad(format!("{what} has {} values, expected {n}", v.len())));
            }
            Ok(Array1::from(v))
        };
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            let [rows, cols] = l.shape;
            if rows != fan_in {
                return Err(bad(format!("layer {} expects {rows} inputs, previous layer gives {fan_in}", i + 1)));
            }
            let last = i + 1 == self.layers.len();
            if last != l.batch_norm.is_none() || (last && cols != 1) {
                return Err(bad(format!("layer {} has the wrong shape for its position", i + 1)));
            }
            let w = vec(&l.weight, rows * cols, "weight")?
                .into_shape_with_order((rows, cols))
                .map_err(|e| bad(e.to_string()))?;
            let bn = match &l.batch_norm {
                Some(b) => {
                    let running_var = vec(&b.running_var, cols, "running_var")?;
                    if running_var.iter().any(|&v| !(v > 0.0)) {
                        return Err(bad(format!("layer {} has non-positive running variance", i + 1)));
                    }
                    Some(BatchNorm {
                        gamma: vec(&b.gamma, cols, "gamma")?,
                        beta: vec(&b.beta, cols, "beta")?,
                        running_mean: vec(&b.running_mean, cols, "running_mean")?,
                        running_var,
                    })
                }
                None => None,
            };
            layers.push(Layer {
                w,
                b: vec(&l.bias, cols, "bias")?,
                bn,
            });
            fan_in = cols;
        }
        if layers.is_empty() {
            return Err(bad("member has no layers".into()));
        }
        Ok(Mlp {
            layers,
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        })
    }
}

#[cfg(test)]
mod tests;
