use std::cmp::Ordering;

use super::{DecodeConfig, TokenScorer};
use crate::ctc::{CtcPosterior, CtcPrefixScorer, PrefixScorerState};
use crate::data::format_tokens;
use crate::error::{Error, Result};
use crate::model::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Start token followed by the emitted labels; the end token is not stored.
    pub tokens: Vec<usize>,
    pub att_logp: f64,
    /// CTC prefix log-probability, or the exact sequence log-probability once finished.
    pub ctc_logp: f64,
    pub lm_logp: f64,
    /// `None` when the CTC branch is weighted out.
    pub ctc_state: Option<PrefixScorerState>,
    pub finished: bool,
    /// Ranking key, equal to [`joint_score`] of the parts.
    pub score: f64,
}

impl Hypothesis {
    /// Emitted labels without the start token.
    pub fn output(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

fn combine(ctc: f64, att: f64, lm: f64, cfg: &DecodeConfig) -> f64 {
    cfg.mu * ctc + (1.0 - cfg.mu) * att + cfg.lm_weight * lm
}

/// `mu·ctc + (1 − mu)·att + lm_weight·lm`.
pub fn joint_score(h: &Hypothesis, cfg: &DecodeConfig) -> f64 {
    combine(h.ctc_logp, h.att_logp, h.lm_logp, cfg)
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Finished hypotheses, best first. When nothing finished this holds the best live
    /// hypothesis and `warning` is set.
    pub hyps: Vec<Hypothesis>,
    pub warning: bool,
}

impl SearchResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

pub fn format_decode_line(utt_id: &str, tokens: &[usize], score: f64) -> String {
    format!("{utt_id}\t{}\t{score:.6}", format_tokens(tokens))
}

/// Joint search with the length budget `cfg.max_len_ratio · T'`.
pub fn beam_search(
    posterior: &CtcPosterior,
    att: &dyn TokenScorer,
    lm: Option<&dyn TokenScorer>,
    vocab: Vocab,
    cfg: &DecodeConfig,
) -> Result<SearchResult> {
    beam_search_bounded(posterior, att, lm, vocab, cfg, cfg.max_len(posterior.frames()))
}

struct Candidate {
    parent: usize,
    tokens: Vec<usize>,
    att: f64,
    ctc: f64,
    lm: f64,
    state: Option<PrefixScorerState>,
    score: f64,
}

/// Joint search emitting at most `max_len` labels before the end token.
///
/// Each step scores every live hypothesis extended by every token except the start token,
/// keeps the `beam_size` best extensions overall, and moves those ending in the end token
/// to the finished list. At `max_len` only the end token may be proposed.
pub fn beam_search_bounded(
    posterior: &CtcPosterior,
    att: &dyn TokenScorer,
    lm: Option<&dyn TokenScorer>,
    vocab: Vocab,
    cfg: &DecodeConfig,
    max_len: usize,
) -> Result<SearchResult> {
    cfg.validate()?;
    let v = vocab.size();
    let (sos, eos) = (vocab.sos(), vocab.eos());
    let use_ctc = cfg.mu > 0.0;
    let use_att = cfg.mu < 1.0;
    let lm = lm.filter(|_| cfg.lm_weight > 0.0);
    if use_ctc && posterior.classes() != v + 1 {
        return Err(Error::invalid(format!(
            "ctc posterior has {} classes, expected {}",
            posterior.classes(),
            v + 1
        )));
    }
    let scorer = CtcPrefixScorer::new(posterior, Some(eos));

    let mut live = vec![Hypothesis {
        tokens: vec![sos],
        att_logp: 0.0,
        ctc_logp: 0.0,
        lm_logp: 0.0,
        ctc_state: use_ctc.then(|| scorer.initial_state()),
        finished: false,
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut last_live = live.clone();

    for step in 0..=max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<Candidate> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let att_lp = if use_att { checked(att.log_probs(&h.tokens)?, v, "attention")? } else { vec![0.0; v] };
            let lm_lp = match lm {
                Some(s) => checked(s.log_probs(&h.tokens)?, v, "language model")?,
                None => vec![0.0; v],
            };
            for c in 0..v {
                if c == sos || (step == max_len && c != eos) {
                    continue;
                }
                let (state, ctc) = match &h.ctc_state {
                    Some(st) => {
                        let (ns, _) = scorer.extend(st, c)?;
                        let lp = ns.log_prefix();
                        (Some(ns), lp)
                    }
                    None => (None, 0.0),
                };
                let a = h.att_logp + att_lp[c];
                let l = h.lm_logp + lm_lp[c];
                let score = combine(ctc, a, l, cfg);
                if score.is_nan() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                cands.push(Candidate {
                    parent: hi,
                    tokens,
                    att: a,
                    ctc,
                    lm: l,
                    state,
                    score,
                });
            }
        }
        cands.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        cands.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(cands.len());
        for mut c in cands {
            debug_assert!(c.parent < live.len());
            let done = c.tokens.last() == Some(&eos);
            if done {
                c.tokens.pop();
            }
            let h = Hypothesis {
                tokens: c.tokens,
                att_logp: c.att,
                ctc_logp: c.ctc,
                lm_logp: c.lm,
                ctc_state: c.state,
                finished: done,
                score: c.score,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        if !next.is_empty() {
            last_live.clone_from(&next);
        }
        live = next;
    }

    let warning = finished.is_empty();
    let mut hyps = if warning { last_live } else { finished };
    hyps.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    Ok(SearchResult { hyps, warning })
}

fn checked(lp: Vec<f64>, v: usize, what: &str) -> Result<Vec<f64>> {
    if lp.len() != v {
        return Err(Error::invalid(format!("{what} scorer returned {} scores for {v} tokens", lp.len())));
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_score_boundaries() {
        let h = Hypothesis {
            tokens: vec![0],
            att_logp: -4.0,
            ctc_logp: -2.0,
            lm_logp: -1.0,
            ctc_state: None,
            finished: false,
            score: 0.0,
        };
        let cfg = |mu, lm_weight| DecodeConfig {
            mu,
            lm_weight,
            ..DecodeConfig::default()
        };
        assert_eq!(joint_score(&h, &cfg(0.0, 0.0)), -4.0);
        assert_eq!(joint_score(&h, &cfg(1.0, 0.0)), -2.0);
        assert!((joint_score(&h, &cfg(0.5, 0.3)) + 3.3).abs() < 1e-12);
    }

    #[test]
    fn decode_line_format() {
        assert_eq!(format_decode_line("u1", &[3, 1], -1.5), "u1\t3 1\t-1.500000");
        assert_eq!(format_decode_line("u2", &[], 0.0), "u2\t\t0.000000");
    }
}
