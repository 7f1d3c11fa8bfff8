//! Hybrid CTC/attention sequence recognizer with a one-cross attention decoder.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors and reverse-mode
//! differentiation, [`layers`] the transformer blocks, [`model`] the assembled networks,
//! [`ctc`] the alignment loss and prefix scorer, [`training`] the optimization loop,
//! [`decoding`] joint beam search and error rates, and [`data`] corpora and file formats.

pub mod ctc;
pub mod data;
pub mod decoding;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{CheckpointError, Error, Result};
