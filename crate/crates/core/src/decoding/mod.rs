//! Joint CTC/attention beam search with optional shallow-fusion LM, and error rates.

mod cer;
mod scorers;
mod search;

pub use cer::{cer, corpus_cer, levenshtein};
pub use scorers::{decode_utterance, AttentionScorer, LmScorer, TokenScorer};
pub use search::{beam_search, beam_search_bounded, format_decode_line, joint_score, Hypothesis, SearchResult};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Weight of the CTC prefix score; the attention score gets `1 − mu`.
    pub mu: f64,
    /// Weight of the external LM, outside the `(mu, 1 − mu)` pair.
    pub lm_weight: f64,
    pub beam_size: usize,
    /// Output length budget as a multiple of the encoder length.
    pub max_len_ratio: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            lm_weight: 0.3,
            beam_size: 10,
            max_len_ratio: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid(format!("mu {} outside [0,1]", self.mu)));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::invalid(format!("lm_weight {} must be ≥ 0", self.lm_weight)));
        }
        if self.beam_size == 0 {
            return Err(Error::invalid("beam_size must be ≥ 1"));
        }
        if !(self.max_len_ratio >= 0.0 && self.max_len_ratio.is_finite()) {
            return Err(Error::invalid(format!("max_len_ratio {} must be ≥ 0", self.max_len_ratio)));
        }
        Ok(())
    }

    /// Longest label sequence (end marker excluded) for `frames` encoder frames.
    pub fn max_len(&self, frames: usize) -> usize {
        (self.max_len_ratio * frames as f64).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DecodeConfig::default();
        assert_eq!(c.beam_size, 10);
        assert_eq!((c.mu, c.lm_weight), (0.5, 0.3));
        assert_eq!(c.max_len(23), 23);
        assert!(DecodeConfig { beam_size: 0, ..c }.validate().is_err());
        assert!(DecodeConfig { mu: 1.1, ..c }.validate().is_err());
    }
}
