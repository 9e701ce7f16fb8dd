//! Feature matrices built from hidden-state pairs, and the `HSD1` binary
//! dataset format.

use crate::protocol::HiddenStatePair;
use crate::text::TokenLabel;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

/// Which hidden-state view feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureMode {
    X1Only,
    X2Only,
    Diff,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::X1Only, FeatureMode::X2Only, FeatureMode::Diff];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::X1Only => "X1_ONLY",
            FeatureMode::X2Only => "X2_ONLY",
            FeatureMode::Diff => "DIFF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "X1_ONLY" | "X1" => Some(FeatureMode::X1Only),
            "X2_ONLY" | "X2" => Some(FeatureMode::X2Only),
            "DIFF" | "X1_X2" => Some(FeatureMode::Diff),
            _ => None,
        }
    }

    /// Feature row of one pair.
    pub fn row(self, pair: &HiddenStatePair) -> Vec<f32> {
        match self {
            FeatureMode::X1Only => pair.x1.clone(),
            FeatureMode::X2Only => pair.x2.clone(),
            FeatureMode::Diff => pair.delta(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// Row-major feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<TokenLabel>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<TokenLabel>) -> Result<Self, DatasetError> {
        if features.len() != dim * labels.len() {
            return Err(DatasetError::Input(format!(
                "{} values do not form {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn inaccurate_count(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_accurate()).count()
    }

    pub fn write_hsd1<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let n = u32::try_from(self.len()).map_err(|_| DatasetError::Input("too many rows".into()))?;
        let d = u32::try_from(self.dim).map_err(|_| DatasetError::Input("dimension too large".into()))?;
        w.write_all(b"HSD1")?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.dim * 4 + 1);
        for i in 0..self.len() {
            buf.clear();
            for v in self.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(self.labels[i].class_index());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_hsd1<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[..4] != b"HSD1" {
            return Err(DatasetError::Format("missing HSD1 magic".into()));
        }
        let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut row = vec![0u8; dim * 4 + 1];
        for i in 0..n {
            r.read_exact(&mut row)
                .map_err(|e| DatasetError::Format(format!("row {i}: {e}")))?;
            features.extend(row[..dim * 4].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
            labels.push(
                TokenLabel::from_class_index(row[dim * 4])
                    .ok_or_else(|| DatasetError::Format(format!("row {i}: label byte {}", row[dim * 4])))?,
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DatasetError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { dim, features, labels })
    }
}

/// Stacks pairs into a feature matrix under `mode`. All pairs must share
/// one dimension and carry a label.
pub fn build_features(pairs: &[HiddenStatePair], labels: &[TokenLabel], mode: FeatureMode) -> Result<Dataset, DatasetError> {
    if pairs.len() != labels.len() {
        return Err(DatasetError::Input(format!(
            "{} pairs but {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    let dim = pairs.first().map_or(0, |p| p.x1.len());
    let mut features = Vec::with_capacity(pairs.len() * dim);
    for (i, p) in pairs.iter().enumerate() {
        if p.x1.len() != dim || p.x2.len() != dim {
            return Err(DatasetError::Input(format!(
                "pair {i} has dimensions ({}, {}), expected {dim}",
                p.x1.len(),
                p.x2.len()
            )));
        }
        features.extend(mode.row(p));
    }
    Dataset::new(dim, features, labels.to_vec())
}
