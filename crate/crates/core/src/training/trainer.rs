use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{average_checkpoints, clip_grad_norm, lr_at, mtl_loss, Adam, EarlyStopping, EpochRecord, Grads, TrainConfig};
use crate::ctc;
use crate::data::{Checkpoint, Utterance};
use crate::error::{Error, Result};
use crate::model::{apply_freeze_policy, ForwardCtx, FreezePolicy, ModelParams, Phase, Preformer};
use crate::numerics::{Graph, NodeId};

/// Which objective and trainable set a [`Trainer`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Joint CTC + attention fine-tuning under the staged freeze policy.
    Joint,
    /// CTC-only training of the whole encoder and CTC head; produces encoder donors.
    EncoderCtcPretrain,
}

/// Loss statistics and (optionally) summed gradients of one batch.
#[derive(Debug, Clone, Default)]
pub struct BatchGrads {
    pub grads: Grads,
    /// Mean CTC loss over utterances whose target fits the encoder length.
    pub ctc_mean: f64,
    pub ce_mean: f64,
    pub n_feasible: usize,
    pub n: usize,
    pub mtl: f64,
}

/// Batch objective `λ·mean_feasible(ctc) + (1−λ)·mean(ce)` and its gradient w.r.t. every
/// trainable parameter. Utterances with infeasible CTC targets contribute only to the CE
/// term. With `λ = 0` the CTC branch is not evaluated and with `λ = 1` the decoder is not.
pub fn batch_gradients(
    model: &Preformer,
    params: &ModelParams,
    batch: &[&Utterance],
    lambda: f64,
    smoothing: f64,
    track_grads: bool,
    dropout: Option<(f64, u64)>,
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    mtl_loss(0.0, 0.0, lambda)?;
    let vocab = model.vocab();
    let feasible: Vec<bool> = batch
        .iter()
        .map(|u| ctc::is_feasible(&u.tokens, model.encoder().output_len(u.feats.shape()[0])))
        .collect();
    let n = batch.len();
    let n_feasible = feasible.iter().filter(|&&f| f).count();
    let use_ctc = lambda > 0.0 && n_feasible > 0;
    let use_ce = lambda < 1.0;

    let mut out = BatchGrads {
        n,
        n_feasible,
        ..BatchGrads::default()
    };
    let (mut ctc_sum, mut ce_sum) = (0.0, 0.0);
    for (i, u) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let (loss, bindings) = {
            let mut ctx = ForwardCtx::new(&mut g, params, track_grads);
            if let Some((rate, seed)) = dropout {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                ctx = ctx.with_dropout(rate, rng);
            }
            let enc = model.encode(&mut ctx, &u.feats)?;
            let mut terms: Vec<NodeId> = Vec::new();
            if use_ctc && feasible[i] {
                let logits = model.ctc_logits(&mut ctx, enc)?;
                let lp = ctx.graph.log_softmax(logits)?;
                let l = ctx.graph.ctc_loss(lp, &u.tokens)?;
                ctc_sum += ctx.graph.value(l).item();
                terms.push(ctx.graph.scale(l, lambda / n_feasible as f64)?);
            }
            if use_ce {
                let mut prefix = Vec::with_capacity(u.tokens.len() + 1);
                prefix.push(vocab.sos());
                prefix.extend_from_slice(&u.tokens);
                let mut targets = u.tokens.clone();
                targets.push(vocab.eos());
                let logits = model.decode_logits(&mut ctx, &prefix, enc)?;
                let l = ctx.graph.cross_entropy(logits, &targets, smoothing)?;
                ce_sum += ctx.graph.value(l).item();
                terms.push(ctx.graph.scale(l, (1.0 - lambda) / n as f64)?);
            }
            let mut loss = match terms.first() {
                Some(&t) => t,
                None => continue,
            };
            for &t in &terms[1..] {
                loss = ctx.graph.add(loss, t)?;
            }
            (loss, if track_grads { ctx.bindings().clone() } else { Default::default() })
        };
        if !track_grads {
            continue;
        }
        g.backward(loss)?;
        for (path, id) in bindings {
            if let Some(grad) = g.grad(id) {
                match out.grads.get_mut(&path) {
                    Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                    None => {
                        out.grads.insert(path, grad.to_vec());
                    }
                }
            }
        }
    }
    out.ctc_mean = if n_feasible > 0 { ctc_sum / n_feasible as f64 } else { 0.0 };
    out.ce_mean = ce_sum / n as f64;
    out.mtl = if use_ctc {
        mtl_loss(out.ctc_mean, out.ce_mean, lambda)?
    } else {
        (1.0 - lambda) * out.ce_mean
    };
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub updates: usize,
    /// Epochs whose checkpoints were averaged into the final parameters.
    pub averaged_epochs: Vec<usize>,
}

pub struct Trainer<'m> {
    model: &'m Preformer,
    cfg: TrainConfig,
    mode: TrainMode,
    policy: FreezePolicy,
    adam: Adam,
    update: usize,
    phase: Option<Phase>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Preformer, cfg: TrainConfig, mode: TrainMode, policy: FreezePolicy) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            mode,
            policy,
            adam: Adam::default(),
            update: 0,
            phase: None,
        })
    }

    pub fn updates(&self) -> usize {
        self.update
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn lambda(&self) -> f64 {
        match self.mode {
            TrainMode::Joint => self.cfg.lambda_ctc,
            TrainMode::EncoderCtcPretrain => 1.0,
        }
    }

    /// Sets freeze flags for the next update.
    pub fn prepare(&mut self, params: &mut ModelParams) -> Result<()> {
        match self.mode {
            TrainMode::EncoderCtcPretrain => {
                if self.phase.is_none() {
                    params.set_frozen("", true);
                    params.set_frozen("encoder", false);
                    params.set_frozen("ctc", false);
                    self.phase = Some(Phase::Main);
                }
            }
            TrainMode::Joint => {
                let want = if self.update < self.cfg.warm_phase_updates { Phase::Warm } else { Phase::Main };
                if self.phase != Some(want) {
                    apply_freeze_policy(params, self.model, want, &self.policy)?;
                    self.phase = Some(want);
                }
            }
        }
        Ok(())
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, params: &mut ModelParams, batch: &[&Utterance]) -> Result<BatchGrads> {
        self.prepare(params)?;
        let update = self.update + 1;
        let dropout = (self.model.config().dropout > 0.0)
            .then(|| (self.model.config().dropout, self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(update as u64)));
        let mut bg = batch_gradients(self.model, params, batch, self.lambda(), self.cfg.label_smoothing, true, dropout)
            .map_err(|e| diverged(e, update))?;
        if !bg.mtl.is_finite() {
            return Err(Error::Diverged {
                update,
                detail: format!("batch loss {}", bg.mtl),
            });
        }
        clip_grad_norm(&mut bg.grads, self.cfg.grad_clip);
        self.adam
            .step(params, &bg.grads, lr_at(update, &self.cfg))
            .map_err(|e| diverged(e, update))?;
        self.update = update;
        Ok(bg)
    }

    /// Objective over `utts` without gradients: means are taken over the whole set.
    pub fn evaluate(&self, params: &ModelParams, utts: &[Utterance]) -> Result<f64> {
        evaluate_mtl(self.model, params, utts, self.lambda(), self.cfg.label_smoothing)
    }

    /// Epoch loop with per-epoch validation, checkpointing, early stopping and final
    /// averaging of the last `avg_last_k` epoch checkpoints into `params`.
    pub fn train_epochs(
        &mut self,
        params: &mut ModelParams,
        train: &[Utterance],
        dev: &[Utterance],
        out_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<TrainOutcome> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::invalid("training needs non-empty train and dev sets"));
        }
        let mut stopper = EarlyStopping::new(self.cfg.patience);
        let mut recent: VecDeque<(usize, Checkpoint)> = VecDeque::new();
        let mut records = Vec::new();
        let mut stopped_early = false;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.cfg.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            let mut weighted = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
                let bg = self.step(params, &batch)?;
                weighted += bg.mtl * batch.len() as f64;
            }
            let dev_mtl = self.evaluate(params, dev)?;
            if !dev_mtl.is_finite() {
                return Err(Error::Diverged {
                    update: self.update,
                    detail: format!("dev loss {dev_mtl} after epoch {epoch}"),
                });
            }
            let rec = EpochRecord {
                epoch,
                update: self.update,
                train_mtl: weighted / train.len() as f64,
                dev_mtl,
                lr: lr_at(self.update, &self.cfg),
            };
            writeln!(log, "{rec}").map_err(|e| Error::io("training log", e))?;
            records.push(rec);

            let ckpt = params.to_checkpoint("");
            if let Some(dir) = out_dir {
                ckpt.save(dir.join(format!("ckpt_epoch{epoch:03}.pfc")))?;
            }
            recent.push_back((epoch, ckpt));
            if recent.len() > self.cfg.avg_last_k {
                recent.pop_front();
            }
            if stopper.observe(dev_mtl) {
                stopped_early = epoch < self.cfg.max_epochs;
                break;
            }
        }
        let ckpts: Vec<Checkpoint> = recent.iter().map(|(_, c)| c.clone()).collect();
        params.load_checkpoint(&average_checkpoints(&ckpts)?)?;
        Ok(TrainOutcome {
            records,
            best_epoch: stopper.best_epoch(),
            stopped_early,
            updates: self.update,
            averaged_epochs: recent.iter().map(|(e, _)| *e).collect(),
        })
    }
}

fn diverged(e: Error, update: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            update,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Set-level objective: mean CTC over feasible utterances and mean CE over all.
pub(crate) fn evaluate_mtl(model: &Preformer, params: &ModelParams, utts: &[Utterance], lambda: f64, smoothing: f64) -> Result<f64> {
    let refs: Vec<&Utterance> = utts.iter().collect();
    let bg = batch_gradients(model, params, &refs, lambda, smoothing, false, None)?;
    Ok(bg.mtl)
}
