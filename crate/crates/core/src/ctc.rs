//! Connectionist temporal classification: loss, best-path decoding and the incremental
//! prefix scorer used by joint beam search.
//!
//! Every routine here works on per-frame log-probabilities over `C` classes where the
//! blank is the last class (`C - 1`). All dynamic programming is in the log domain with
//! [`LOG_ZERO`] as the zero sentinel.

use crate::error::{Error, Result};
use crate::numerics::{is_log_zero, log_add, log_mul, log_sum_exp, Tensor, LOG_ZERO};

/// Per-frame log-softmax over labels plus blank (last column).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosterior {
    log_probs: Tensor,
}

impl CtcPosterior {
    /// Wraps log-probabilities, checking every row normalizes to 1 within 1e-9.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        let (_, c) = log_probs.dims2()?;
        if c < 2 {
            return Err(Error::invalid("ctc posterior needs at least one label and a blank"));
        }
        for (t, row) in log_probs.data().chunks(c).enumerate() {
            let lse = log_sum_exp(row);
            if (lse).abs() > 1e-9 {
                return Err(Error::invalid(format!("frame {t} log-sum-exps to {lse}, not 0")));
            }
        }
        Ok(Self { log_probs })
    }

    /// Log-softmax of raw per-frame scores.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (t, c) = logits.dims2()?;
        let mut out = Vec::with_capacity(t * c);
        for row in logits.data().chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        Self::new(Tensor::new(vec![t, c], out)?)
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    #[inline]
    fn at(&self, t: usize, k: usize) -> f64 {
        self.log_probs.data()[t * self.classes() + k]
    }
}

/// Outcome of [`ctc_loss`]. Infeasible targets have zero probability and are kept
/// distinct from finite losses so batch reductions can skip them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtcLoss {
    Finite(f64),
    Infeasible,
}

impl CtcLoss {
    /// Negative log-likelihood; `+∞` when infeasible.
    pub fn value(self) -> f64 {
        match self {
            CtcLoss::Finite(v) => v,
            CtcLoss::Infeasible => f64::INFINITY,
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, CtcLoss::Finite(_))
    }
}

/// Minimum frame count needed to emit `target`: one frame per label plus a separating
/// blank between each pair of identical neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], frames: usize) -> bool {
    frames > 0 && min_frames(target) <= frames
}

pub fn ctc_loss(posterior: &CtcPosterior, target: &[usize]) -> Result<CtcLoss> {
    let (t, c) = (posterior.frames(), posterior.classes());
    Ok(match forward_backward(posterior.log_probs.data(), t, c, target)? {
        Some(fb) => CtcLoss::Finite(fb.loss),
        None => CtcLoss::Infeasible,
    })
}

pub(crate) struct ForwardBackward {
    pub loss: f64,
    /// d loss / d log_probs, row-major `[T × C]`.
    pub grad: Vec<f64>,
}

/// Forward-backward over the blank-expanded target. Returns `None` for infeasible targets.
pub(crate) fn forward_backward(lp: &[f64], frames: usize, classes: usize, target: &[usize]) -> Result<Option<ForwardBackward>> {
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&k| k >= blank) {
        return Err(Error::invalid(format!(
            "ctc target token {bad} is the blank or outside {blank} labels"
        )));
    }
    if !is_feasible(target, frames) {
        return Ok(None);
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    // l'_s may skip from s-2 when it is a label different from l'_{s-2}.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let y = |t: usize, s: usize| lp[t * classes + label(s)];

    let mut alpha = vec![LOG_ZERO; frames * s_len];
    alpha[0] = y(0, 0);
    if s_len > 1 {
        alpha[1] = y(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = log_mul(a, y(t, s));
        }
    }

    let mut beta = vec![LOG_ZERO; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = y(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = y(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = log_mul(b, y(t, s));
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if is_log_zero(log_p) {
        return Ok(None);
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if is_log_zero(alpha[t * s_len + s]) || is_log_zero(beta[t * s_len + s]) {
                continue;
            }
            grad[t * classes + label(s)] -= (ab - y(t, s) - log_p).exp();
        }
    }
    Ok(Some(ForwardBackward { loss: -log_p, grad }))
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(posterior: &CtcPosterior) -> Vec<usize> {
    let blank = posterior.blank();
    let path = (0..posterior.frames()).map(|t| {
        (0..posterior.classes())
            .max_by(|&a, &b| posterior.at(t, a).total_cmp(&posterior.at(t, b)).then(b.cmp(&a)))
            .unwrap_or(blank)
    });
    collapse_path(path, blank)
}

/// Collapses a frame-level path: merge consecutive duplicates, then remove blanks.
pub fn collapse_path(path: impl IntoIterator<Item = usize>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Prefix-scorer state for one hypothesis prefix `g`.
///
/// `r_label[t]` / `r_blank[t]` hold the log-probability that frames `0..=t` collapse to
/// exactly `g` with the last frame emitting `g`'s last label / a blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixScorerState {
    r_label: Vec<f64>,
    r_blank: Vec<f64>,
    last: Option<usize>,
    log_prefix: f64,
    ended: bool,
}

impl PrefixScorerState {
    /// Log-probability that the collapsed output begins with this prefix (or, after an
    /// end-of-sequence extension, equals it).
    pub fn log_prefix(&self) -> f64 {
        self.log_prefix
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }
}

/// Incremental CTC prefix probabilities over a fixed posterior.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer<'a> {
    posterior: &'a CtcPosterior,
    eos: Option<usize>,
}

impl<'a> CtcPrefixScorer<'a> {
    /// `eos`, when given, is the token whose extension terminates the prefix.
    pub fn new(posterior: &'a CtcPosterior, eos: Option<usize>) -> Self {
        Self { posterior, eos }
    }

    /// State of the empty prefix.
    pub fn initial_state(&self) -> PrefixScorerState {
        let p = self.posterior;
        let blank = p.blank();
        let mut r_blank = Vec::with_capacity(p.frames());
        let mut acc = 0.0;
        for t in 0..p.frames() {
            acc = log_mul(acc, p.at(t, blank));
            r_blank.push(acc);
        }
        PrefixScorerState {
            r_label: vec![LOG_ZERO; p.frames()],
            r_blank,
            last: None,
            log_prefix: 0.0,
            ended: false,
        }
    }

    /// Probability that the collapsed output equals the prefix exactly.
    pub fn end_log_prob(&self, state: &PrefixScorerState) -> f64 {
        let t = self.posterior.frames() - 1;
        log_add(state.r_label[t], state.r_blank[t])
    }

    /// Extends `state` by `token`, returning the new state and
    /// `log p(prefix·token) − log p(prefix)`. Extending by the end token yields the exact
    /// sequence probability instead of a prefix probability.
    pub fn extend(&self, state: &PrefixScorerState, token: usize) -> Result<(PrefixScorerState, f64)> {
        let p = self.posterior;
        let blank = p.blank();
        if token == blank {
            return Err(Error::invalid("blank cannot extend a ctc prefix"));
        }
        if token >= p.classes() {
            return Err(Error::invalid(format!("token {token} outside {} ctc classes", p.classes())));
        }
        if state.ended {
            return Err(Error::invalid("cannot extend an ended prefix"));
        }
        if Some(token) == self.eos {
            let end = self.end_log_prob(state);
            let next = PrefixScorerState {
                log_prefix: end,
                ended: true,
                ..state.clone()
            };
            return Ok((next, increment(end, state.log_prefix)));
        }

        let frames = p.frames();
        // Mass that may transition into a fresh `token` at frame t+1 from prefix paths
        // ending at t; a repeated label must pass through a blank first.
        let phi = |t: usize| {
            if state.last == Some(token) {
                state.r_blank[t]
            } else {
                log_add(state.r_blank[t], state.r_label[t])
            }
        };
        let mut r_label = vec![LOG_ZERO; frames];
        let mut r_blank = vec![LOG_ZERO; frames];
        if state.last.is_none() {
            r_label[0] = p.at(0, token);
        }
        let mut log_prefix = r_label[0];
        for t in 1..frames {
            let ph = phi(t - 1);
            r_label[t] = log_mul(log_add(r_label[t - 1], ph), p.at(t, token));
            r_blank[t] = log_mul(log_add(r_blank[t - 1], r_label[t - 1]), p.at(t, blank));
            log_prefix = log_add(log_prefix, log_mul(ph, p.at(t, token)));
        }
        let next = PrefixScorerState {
            r_label,
            r_blank,
            last: Some(token),
            log_prefix,
            ended: false,
        };
        Ok((next, increment(log_prefix, state.log_prefix)))
    }

    /// Runs the chain of extensions over `tokens`, returning the final state.
    pub fn score_sequence(&self, tokens: &[usize]) -> Result<PrefixScorerState> {
        let mut state = self.initial_state();
        for &k in tokens {
            state = self.extend(&state, k)?.0;
        }
        Ok(state)
    }
}

fn increment(new: f64, old: f64) -> f64 {
    if is_log_zero(new) {
        LOG_ZERO
    } else {
        new - old
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posterior(rows: &[&[f64]]) -> CtcPosterior {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        CtcPosterior::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        // classes: a, blank
        let p = posterior(&[&[0.7, 0.3]]);
        let loss = ctc_loss(&p, &[0]).unwrap().value();
        assert!((loss + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_hand_enumerated() {
        let (a1, b1, a2, b2) = (0.6, 0.4, 0.2, 0.8);
        let p = posterior(&[&[a1, b1], &[a2, b2]]);
        let expected = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        let loss = ctc_loss(&p, &[0]).unwrap().value();
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn repeat_without_blank_room_is_infeasible() {
        let p = posterior(&[&[0.6, 0.4], &[0.2, 0.8]]);
        let loss = ctc_loss(&p, &[0, 0]).unwrap();
        assert_eq!(loss, CtcLoss::Infeasible);
        assert_eq!(loss.value(), f64::INFINITY);
        assert!(ctc_loss(&p, &[1]).is_err(), "blank is not a target label");
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(collapse_path([0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(collapse_path([2, 2, 2], 2), Vec::<usize>::new());
        assert_eq!(collapse_path([0, 2, 0], 2), vec![0, 0]);

        let p = posterior(&[&[0.8, 0.1, 0.1], &[0.6, 0.2, 0.2], &[0.1, 0.1, 0.8], &[0.1, 0.7, 0.2]]);
        assert_eq!(ctc_greedy_decode(&p), vec![0, 1]);
    }

    #[test]
    fn prefix_extension_rejects_blank() {
        let p = posterior(&[&[0.5, 0.5]]);
        let s = CtcPrefixScorer::new(&p, None);
        assert!(s.extend(&s.initial_state(), 1).is_err());
    }

    #[test]
    fn posterior_rows_must_normalize() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(CtcPosterior::new(t).is_err());
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let frames = 200;
        let row: Vec<f64> = vec![1e-3, 1e-3, 1.0 - 2e-3];
        let rows: Vec<&[f64]> = (0..frames).map(|_| row.as_slice()).collect();
        let p = posterior(&rows);
        let target: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let loss = ctc_loss(&p, &target).unwrap();
        assert!(loss.is_feasible());
        assert!(loss.value().is_finite() && loss.value() > 0.0);
    }
}
