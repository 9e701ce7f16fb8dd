//! Hallucination-controlled caption decoding: a backend protocol for
//! vision-language models, a deterministic mock backend, detector-score
//! fusion, token annotation, a hidden-state MLP classifier, sentence-level
//! decoding, diagnostics and CHAIR evaluation.

pub mod analysis;
pub mod annotate;
pub mod chair;
pub mod classifier;
pub mod decoder;
pub mod fusion;
pub mod mock;
pub mod protocol;
pub mod text;
