//! Newline-delimited JSON messages. Every request carries a client-chosen
//! `id` echoed by the response. Hidden vectors travel as base64 of
//! little-endian `f32`.

use super::{BackendError, GreedyOutput, ModelInfo, SequenceContext, StepResult};
use crate::text::TokenId;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Encodes `f32` values as base64 of their little-endian bytes.
pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(s: &str) -> Result<Vec<f32>, BackendError> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| BackendError::Protocol(format!("bad base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(BackendError::Protocol(format!(
            "vector payload of {} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RequestBody {
    Describe,
    TopKNext {
        #[serde(flatten)]
        ctx: SequenceContext,
        k: usize,
        with_image: bool,
    },
    GreedyExtend {
        #[serde(flatten)]
        ctx: SequenceContext,
        stop_tokens: Vec<TokenId>,
        with_image: bool,
    },
    HiddenStates {
        #[serde(flatten)]
        ctx: SequenceContext,
        tokens: Vec<TokenId>,
        with_image: bool,
    },
    Discriminative {
        image_ref: String,
        object_name: String,
        question: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    pub fn success(id: u64, payload: Value) -> Self {
        Self {
            id,
            ok: true,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn failure(id: u64, err: &BackendError) -> Self {
        Self {
            id,
            ok: false,
            payload: None,
            error: Some(WireError {
                kind: err.kind().to_string(),
                message: err.message(),
            }),
        }
    }

    pub fn into_result(self) -> Result<Value, BackendError> {
        if self.ok {
            self.payload
                .ok_or_else(|| BackendError::Protocol("ok response without payload".into()))
        } else {
            let e = self.error.unwrap_or(WireError {
                kind: "protocol".into(),
                message: "error response without detail".into(),
            });
            Err(BackendError::from_kind(&e.kind, e.message))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKPayload {
    pub top_tokens: Vec<(TokenId, f64)>,
    pub hidden: String,
}

impl TopKPayload {
    pub fn from_step(step: &StepResult) -> Self {
        Self {
            top_tokens: step.top_tokens.clone(),
            hidden: encode_f32(&step.hidden),
        }
    }

    pub fn into_step(self) -> Result<StepResult, BackendError> {
        Ok(StepResult {
            top_tokens: self.top_tokens,
            hidden: decode_f32(&self.hidden)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStatesPayload {
    pub dim: usize,
    pub vectors: Vec<String>,
}

impl HiddenStatesPayload {
    pub fn from_vectors(vectors: &[Vec<f32>]) -> Self {
        Self {
            dim: vectors.first().map_or(0, Vec::len),
            vectors: vectors.iter().map(|v| encode_f32(v)).collect(),
        }
    }

    pub fn into_vectors(self) -> Result<Vec<Vec<f32>>, BackendError> {
        let dim = self.dim;
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let v = decode_f32(s)?;
                if v.len() != dim {
                    return Err(BackendError::Protocol(format!(
                        "vector {i} has dim {}, header says {dim}",
                        v.len()
                    )));
                }
                Ok(v)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativePayload {
    pub reply: String,
}

pub type GreedyPayload = GreedyOutput;
pub type DescribePayload = ModelInfo;
