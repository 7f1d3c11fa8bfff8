//! Glue shared by the command-line driver and end-to-end tests.

use crate::data::Utterance;
use crate::decoding::{corpus_cer, decode_utterance, format_decode_line, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{CausalLm, DecoderKind, ModelConfig, ModelParams, Preformer};

/// Causal LM whose donor group fits the decoder described by `cfg`.
pub fn lm_for(cfg: &ModelConfig) -> Result<CausalLm> {
    let n_self = match cfg.decoder {
        DecoderKind::Ocd { n_self } | DecoderKind::Tcd { n_self } => n_self,
        DecoderKind::Vanilla { .. } => {
            return Err(Error::invalid("a vanilla decoder has no LM-initializable group"));
        }
    };
    Ok(CausalLm::new(cfg.vocab(), cfg.attention()?, cfg.d_ff, n_self, cfg.max_target_len))
}

#[derive(Debug, Clone)]
pub struct DecodedUtterance {
    pub utt_id: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Search ended without any finished hypothesis.
    pub unfinished: bool,
}

impl DecodedUtterance {
    pub fn line(&self) -> String {
        format_decode_line(&self.utt_id, &self.tokens, self.score)
    }
}

#[derive(Debug, Clone)]
pub struct SplitDecode {
    pub utts: Vec<DecodedUtterance>,
    pub cer: f64,
}

/// Decodes every utterance and scores the result against the stored transcripts.
pub fn decode_split(
    model: &Preformer,
    params: &ModelParams,
    utts: &[Utterance],
    lm: Option<(&CausalLm, &ModelParams)>,
    cfg: &DecodeConfig,
) -> Result<SplitDecode> {
    let mut out = Vec::with_capacity(utts.len());
    let mut pairs = Vec::with_capacity(utts.len());
    for u in utts {
        let res = decode_utterance(model, params, &u.feats, lm, cfg)?;
        let best = res.best();
        out.push(DecodedUtterance {
            utt_id: u.utt_id.clone(),
            tokens: best.output().to_vec(),
            score: best.score,
            unfinished: res.warning,
        });
        pairs.push((best.output().to_vec(), u.tokens.clone()));
    }
    Ok(SplitDecode {
        utts: out,
        cer: corpus_cer(&pairs)?,
    })
}
