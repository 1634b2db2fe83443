//! ASR-free automatic fluency scoring.
//!
//! Frame-level self-supervised speech features are clustered with K-means;
//! each frame's cluster index is embedded and concatenated with a projected
//! version of the frame features, and a bidirectional LSTM regresses an
//! utterance-level fluency score. An alignment-driven phone-level scorer is
//! included as a comparison baseline, together with PCC evaluation and the
//! phone/cluster co-occurrence analysis.

pub mod codebook;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod nnet;
pub mod pipeline;
pub mod scorer;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
