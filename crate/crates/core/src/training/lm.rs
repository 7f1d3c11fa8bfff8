use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{average_checkpoints, clip_grad_norm, lr_at, Adam, EarlyStopping, EpochRecord, Grads, TrainConfig};
use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{path_matches, CausalLm, ForwardCtx, ModelParams};
use crate::numerics::Graph;

#[derive(Debug, Clone)]
pub struct LmOutcome {
    /// Full LM including its head, usable for shallow fusion.
    pub params: ModelParams,
    /// Exactly the decoder-initializable group.
    pub donor: Checkpoint,
    pub records: Vec<EpochRecord>,
}

fn io_pair(lm: &CausalLm, seq: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = lm.vocab();
    if seq.len() + 1 > lm.max_len() {
        return Err(Error::invalid(format!("sequence of {} tokens exceeds LM length {}", seq.len(), lm.max_len())));
    }
    if let Some(&bad) = seq.iter().find(|&&t| !v.is_char(t)) {
        return Err(Error::invalid(format!("token {bad} is not a character")));
    }
    let mut input = vec![v.sos()];
    input.extend_from_slice(seq);
    let mut target = seq.to_vec();
    target.push(v.eos());
    Ok((input, target))
}

/// Mean next-token CE of one sequence (end marker included) and optionally its gradients.
fn sequence_loss(lm: &CausalLm, params: &ModelParams, seq: &[usize], grads: Option<(&mut Grads, f64)>) -> Result<f64> {
    let (input, target) = io_pair(lm, seq)?;
    let track = grads.is_some();
    let mut g = Graph::new();
    let (loss, bindings) = {
        let mut ctx = ForwardCtx::new(&mut g, params, track);
        let logits = lm.forward(&mut ctx, &input)?;
        let l = ctx.graph.cross_entropy(logits, &target, 0.0)?;
        (l, ctx.bindings().clone())
    };
    let value = g.value(loss).item();
    if let Some((acc, weight)) = grads {
        let scaled = g.scale(loss, weight)?;
        g.backward(scaled)?;
        for (path, id) in bindings {
            if let Some(grad) = g.grad(id) {
                let slot = acc.entry(path).or_insert_with(|| vec![0.0; grad.len()]);
                slot.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(value)
}

fn mean_loss(lm: &CausalLm, params: &ModelParams, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut s = 0.0;
    for q in seqs {
        s += sequence_loss(lm, params, q, None)?;
    }
    Ok(s / seqs.len() as f64)
}

/// Trains `lm` with next-token cross-entropy and returns the averaged model and its donor
/// group.
pub fn pretrain_lm(
    lm: &CausalLm,
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<LmOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("LM pretraining needs non-empty train and dev corpora"));
    }
    let mut params = ModelParams::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(7);
    lm.init(&mut params, &mut init_rng)?;

    let mut adam = Adam::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut recent = VecDeque::new();
    let mut records = Vec::new();
    let mut update = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            update += 1;
            let mut grads = Grads::new();
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                total += sequence_loss(lm, &params, &train[i], Some((&mut grads, w)))?;
            }
            if !total.is_finite() {
                return Err(Error::Diverged {
                    update,
                    detail: "LM loss".into(),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut params, &grads, lr_at(update, cfg))?;
        }
        let dev_loss = mean_loss(lm, &params, dev)?;
        let rec = EpochRecord {
            epoch,
            update,
            train_mtl: total / train.len() as f64,
            dev_mtl: dev_loss,
            lr: lr_at(update, cfg),
        };
        writeln!(log, "{rec}").map_err(|e| Error::io("training log", e))?;
        records.push(rec);
        recent.push_back(params.to_checkpoint(""));
        if recent.len() > cfg.avg_last_k {
            recent.pop_front();
        }
        if stopper.observe(dev_loss) {
            break;
        }
    }
    let ckpts: Vec<Checkpoint> = recent.into_iter().collect();
    params.load_checkpoint(&average_checkpoints(&ckpts)?)?;
    let selectors = lm.donor_selectors();
    let mut donor = Checkpoint::new();
    for (path, p) in params.iter() {
        if selectors.iter().any(|s| path_matches(path, s)) {
            donor.insert(path, p.tensor.clone());
        }
    }
    Ok(LmOutcome { params, donor, records })
}

/// `exp` of the mean per-token NLL, counting the end marker as a predicted token.
pub fn perplexity(lm: &CausalLm, params: &ModelParams, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for q in seqs {
        nll += sequence_loss(lm, params, q, None)? * (q.len() + 1) as f64;
        n += q.len() + 1;
    }
    if n == 0 {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    Ok((nll / n as f64).exp())
}

/// Perplexity of an add-one unigram model fitted on `train` over characters plus the end
/// marker, evaluated on the same events as [`perplexity`].
pub fn unigram_perplexity(train: &[Vec<usize>], test: &[Vec<usize>], n_chars: usize) -> Result<f64> {
    let eos = n_chars;
    let mut counts = vec![1.0; n_chars + 1];
    for q in train {
        for &t in q {
            *counts.get_mut(t).ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary")))? += 1.0;
        }
        counts[eos] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    let mut n = 0usize;
    for q in test {
        for &t in q.iter().chain(std::iter::once(&eos)) {
            let c = counts.get(t).ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary")))?;
            nll -= (c / total).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    Ok((nll / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::AttentionConfig;
    use crate::model::Vocab;

    #[test]
    fn unigram_uniform_case() {
        let train = vec![vec![0, 1, 2]];
        // counts 2,2,2,1(unseen),2(eos)
        let ppl = unigram_perplexity(&train, &[vec![0]], 4).unwrap();
        let expect = (-(0.5 * ((2.0f64 / 9.0).ln() + (2.0f64 / 9.0).ln()))).exp();
        assert!((ppl - expect).abs() < 1e-12);
    }

    #[test]
    fn short_lm_run_emits_donor_group() {
        let vocab = Vocab::new(4);
        let lm = CausalLm::new(vocab, AttentionConfig::new(8, 2).unwrap(), 16, 1, 16);
        let seqs: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 4, (i + 1) % 4, (i + 2) % 4]).collect();
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            avg_last_k: 1,
            ..TrainConfig::default()
        };
        let out = pretrain_lm(&lm, &seqs, &seqs[..2], &cfg, &mut std::io::sink()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.donor.paths().all(|p| !p.starts_with("lm_head")));
        assert!(out.donor.get("decoder.embed").is_some() && out.donor.get("decoder.ln_f.g").is_some());
        assert_eq!(out.donor.len() + 2, out.params.len());
        assert!(perplexity(&lm, &out.params, &seqs).unwrap().is_finite());
        assert!(pretrain_lm(&lm, &[vec![9]], &seqs, &cfg, &mut std::io::sink()).is_err());
    }
}
