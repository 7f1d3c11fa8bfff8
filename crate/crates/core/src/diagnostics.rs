//! Seeded finite-difference checks over every layer species and both losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    AttentionConfig, CrossLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    PositionalEncoding, SelfLayer, VanillaDecoderLayer,
};
use crate::model::{ConvSpec, DecoderKind, ForwardCtx, ModelConfig, ModelParams, W2vEncoder};
use crate::numerics::{grad_check, GradCheckReport, Graph, Mask, NodeId, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Forward = Box<dyn Fn(&mut ForwardCtx, &[NodeId]) -> Result<NodeId>>;

/// Checks a layer's parameters and the listed inputs, reducing its output with a fixed
/// random weighting so every output element contributes.
fn check_module(
    params: &ModelParams,
    inputs: &[Tensor],
    forward: Forward,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    let mut all: Vec<Tensor> = paths.iter().map(|p| params.tensor(p).cloned()).collect::<Result<_>>()?;
    all.extend(inputs.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(99);
    let weights = Tensor::randn(&[4096], 1.0, &mut rng);
    grad_check(
        |g: &mut Graph, ids: &[NodeId]| {
            let mut ctx = ForwardCtx::new(g, params, true);
            for (p, &id) in paths.iter().zip(ids) {
                ctx.bind(p.clone(), id);
            }
            let y = forward(&mut ctx, &ids[paths.len()..])?;
            let shape = ctx.graph.shape(y).to_vec();
            let n: usize = shape.iter().product();
            let w = ctx.graph.constant(Tensor::new(shape, weights.data()[..n].to_vec())?);
            let p = ctx.graph.mul(y, w)?;
            ctx.graph.sum(p)
        },
        &all,
        h,
        tol,
    )
}

/// Runs the whole suite. Each entry is independent; the first setup error aborts.
pub fn grad_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let d = 8;
    let ff = 12;
    let attn = AttentionConfig::new(d, 2)?;
    let mut stream = 0u64;
    let mut rng = move || {
        stream += 1;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let x = Tensor::randn(&[3, d], 1.0, &mut rng());
    let mem = Tensor::randn(&[4, d], 1.0, &mut rng());
    let mut out = Vec::new();
    let mut run = |name: &'static str, params: ModelParams, inputs: Vec<Tensor>, f: Forward| -> Result<()> {
        let report = check_module(&params, &inputs, f, seed, h, tol)?;
        out.push(SuiteEntry { name, report });
        Ok(())
    };

    let mut p = ModelParams::new();
    let lin = Linear::at("lin", d, 5);
    lin.init(&mut p, &mut rng())?;
    run("linear", p, vec![x.clone()], Box::new(move |c, ids| lin.forward(c, ids[0])))?;

    let mut p = ModelParams::new();
    let ln = LayerNorm::at("ln", d);
    ln.init(&mut p)?;
    // move away from the unit/zero initialization so the check is not degenerate
    for path in ["ln.g", "ln.b"] {
        let t = p.tensor_mut(path)?;
        let noise = Tensor::randn(t.shape(), 0.5, &mut rng());
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    run("layer_norm", p, vec![x.clone()], Box::new(move |c, ids| ln.forward(c, ids[0])))?;

    let mut p = ModelParams::new();
    let ffn = FeedForward::at("ffn", d, ff);
    ffn.init(&mut p, &mut rng())?;
    run("feed_forward", p, vec![x.clone()], Box::new(move |c, ids| ffn.forward(c, ids[0])))?;

    for (name, mask, cross) in [
        ("attention_bidirectional", Mask::None, false),
        ("attention_causal", Mask::Causal, false),
        ("attention_cross", Mask::None, true),
    ] {
        let mut p = ModelParams::new();
        let mha = MultiHeadAttention::at("mha", attn);
        mha.init(&mut p, &mut rng())?;
        let inputs = if cross { vec![x.clone(), mem.clone()] } else { vec![x.clone()] };
        run(
            name,
            p,
            inputs,
            Box::new(move |c, ids| {
                let m = if cross { ids[1] } else { ids[0] };
                mha.forward(c, ids[0], m, mask)
            }),
        )?;
    }

    let mut p = ModelParams::new();
    let pos = PositionalEncoding::Learned {
        path: "pos".into(),
        max_len: 5,
        d_model: d,
    };
    pos.init(&mut p, &mut rng())?;
    run(
        "learned_positions",
        p,
        vec![x.clone()],
        Box::new(move |c, ids| {
            let pe = pos.forward(c, 3)?;
            c.graph.add(ids[0], pe)
        }),
    )?;

    let cfg = ModelConfig {
        n_chars: 4,
        d_feat: 3,
        d_model: d,
        n_heads: 2,
        d_ff: ff,
        conv: vec![ConvSpec {
            kernel: 3,
            stride: 2,
            channels: 6,
        }],
        encoder_layers: 1,
        decoder: DecoderKind::Ocd { n_self: 1 },
        max_frames: 16,
        max_target_len: 8,
        dropout: 0.0,
    };
    let enc = W2vEncoder::new(&cfg, attn);
    let mut p = ModelParams::new();
    enc.init(&mut p, &mut rng())?;
    let feats = Tensor::randn(&[7, 3], 1.0, &mut rng());
    run("conv_encoder", p, vec![], Box::new(move |c, _| enc.forward(c, &feats)))?;

    let mut p = ModelParams::new();
    let l = EncoderLayer::at("enc", attn, ff);
    l.init(&mut p, &mut rng())?;
    run("encoder_layer", p, vec![x.clone()], Box::new(move |c, ids| l.forward(c, ids[0])))?;

    let mut p = ModelParams::new();
    let l = SelfLayer::at("self", attn, ff);
    l.init(&mut p, &mut rng())?;
    run("self_layer", p, vec![x.clone()], Box::new(move |c, ids| l.forward(c, ids[0])))?;

    let mut p = ModelParams::new();
    let l = CrossLayer::at("cross", attn, ff);
    l.init(&mut p, &mut rng())?;
    run(
        "cross_layer",
        p,
        vec![x.clone(), mem.clone()],
        Box::new(move |c, ids| l.forward(c, ids[0], ids[1])),
    )?;

    let mut p = ModelParams::new();
    let l = VanillaDecoderLayer::at("van", attn, ff);
    l.init(&mut p, &mut rng())?;
    run(
        "vanilla_decoder_layer",
        p,
        vec![x.clone(), mem.clone()],
        Box::new(move |c, ids| l.forward(c, ids[0], ids[1])),
    )?;

    let logits = Tensor::randn(&[4, 5], 1.0, &mut rng());
    for (name, smoothing) in [("cross_entropy", 0.0), ("cross_entropy_smoothed", 0.1)] {
        run(
            name,
            ModelParams::new(),
            vec![logits.clone()],
            Box::new(move |c, ids| c.graph.cross_entropy(ids[0], &[1, 4, 0, 4], smoothing)),
        )?;
    }

    let ctc_logits = Tensor::randn(&[6, 4], 1.0, &mut rng());
    run(
        "ctc",
        ModelParams::new(),
        vec![ctc_logits],
        Box::new(|c, ids| {
            let lp = c.graph.log_softmax(ids[0])?;
            c.graph.ctc_loss(lp, &[0, 2, 2])
        }),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_species_and_passes() {
        let entries = grad_suite(1, DEFAULT_H, DEFAULT_TOL).unwrap();
        assert_eq!(entries.len(), 15);
        for e in &entries {
            assert!(e.report.passed(), "{}: {:?}", e.name, e.report);
            assert!(e.report.checked > 0, "{}", e.name);
        }
    }
}
