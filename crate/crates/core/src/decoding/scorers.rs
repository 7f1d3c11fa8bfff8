use super::{beam_search_bounded, DecodeConfig, SearchResult};
use crate::ctc::CtcPosterior;
use crate::error::{Error, Result};
use crate::model::{CausalLm, ForwardCtx, ModelParams, Preformer};
use crate::numerics::{Graph, Tensor};

/// Next-token log-probabilities over the decoder vocabulary given a prefix that starts
/// with the start token.
pub trait TokenScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Attention decoder conditioned on fixed encoder states. Recomputes the full prefix on
/// every call.
pub struct AttentionScorer<'a> {
    model: &'a Preformer,
    params: &'a ModelParams,
    memory: Tensor,
}

impl<'a> AttentionScorer<'a> {
    pub fn new(model: &'a Preformer, params: &'a ModelParams, memory: Tensor) -> Self {
        Self { model, params, memory }
    }
}

fn last_row_log_softmax(g: &mut Graph, logits: crate::numerics::NodeId) -> Result<Vec<f64>> {
    let (l, v) = g.value(logits).dims2()?;
    let row = &g.value(logits).data()[(l - 1) * v..];
    let lse = crate::numerics::log_sum_exp(row);
    Ok(row.iter().map(|x| x - lse).collect())
}

impl TokenScorer for AttentionScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, self.params, false);
        let mem = ctx.graph.constant(self.memory.clone());
        let logits = self.model.decode_logits(&mut ctx, prefix, mem)?;
        last_row_log_softmax(&mut g, logits)
    }
}

pub struct LmScorer<'a> {
    lm: &'a CausalLm,
    params: &'a ModelParams,
}

impl<'a> LmScorer<'a> {
    pub fn new(lm: &'a CausalLm, params: &'a ModelParams) -> Self {
        Self { lm, params }
    }
}

impl TokenScorer for LmScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.lm.next_log_probs(self.params, prefix)
    }
}

/// Encodes `feats` once and runs joint beam search with the model's CTC branch and
/// attention decoder, plus `lm` when given.
pub fn decode_utterance(
    model: &Preformer,
    params: &ModelParams,
    feats: &Tensor,
    lm: Option<(&CausalLm, &ModelParams)>,
    cfg: &DecodeConfig,
) -> Result<SearchResult> {
    let (memory, ctc_logits) = {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, params, false);
        let enc = model.encode(&mut ctx, feats)?;
        let logits = model.ctc_logits(&mut ctx, enc)?;
        (g.value(enc).clone(), g.value(logits).clone())
    };
    let posterior = CtcPosterior::from_logits(&ctc_logits)?;
    let att = AttentionScorer::new(model, params, memory);
    let vocab = model.vocab();
    // the decoder's position table bounds the prefix length
    let max_len = cfg.max_len(posterior.frames()).min(model.decoder().max_len().saturating_sub(1));
    match lm {
        Some((lm, lp)) => {
            if lm.vocab() != vocab {
                return Err(Error::invalid("LM vocabulary differs from the recognizer's"));
            }
            let s = LmScorer::new(lm, lp);
            let max_len = max_len.min(lm.max_len().saturating_sub(1));
            beam_search_bounded(&posterior, &att, Some(&s), vocab, cfg, max_len)
        }
        None => beam_search_bounded(&posterior, &att, None, vocab, cfg, max_len),
    }
}
