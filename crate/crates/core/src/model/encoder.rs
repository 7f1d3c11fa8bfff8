use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{AttentionConfig, EncoderLayer, LayerNorm, Linear, PositionalEncoding};
use crate::model::params::{ForwardCtx, ModelParams};
use crate::numerics::{NodeId, Tensor};

pub const CONV_PREFIX: &str = "encoder.conv";
pub const CONTEXT_PREFIX: &str = "encoder.context";

/// One strided 1-D convolution of the frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_len(&self, t: usize) -> usize {
        (t + 2 * self.padding()).saturating_sub(self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    linear: Linear,
}

/// Frozen convolutional frontend followed by a transformer context network.
#[derive(Debug, Clone)]
pub struct W2vEncoder {
    convs: Vec<ConvLayer>,
    proj: Option<Linear>,
    positions: PositionalEncoding,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

impl W2vEncoder {
    pub fn new(cfg: &ModelConfig, attn: AttentionConfig) -> Self {
        let mut c_in = cfg.d_feat;
        let convs = cfg
            .conv
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let layer = ConvLayer {
                    spec: *spec,
                    linear: Linear::at(&format!("{CONV_PREFIX}.{i}"), spec.kernel * c_in, spec.channels),
                };
                c_in = spec.channels;
                layer
            })
            .collect();
        let proj = (c_in != cfg.d_model).then(|| Linear::at("encoder.proj", c_in, cfg.d_model));
        Self {
            convs,
            proj,
            positions: PositionalEncoding::Sinusoidal {
                max_len: cfg.max_frames,
                d_model: cfg.d_model,
            },
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::at(&format!("{CONTEXT_PREFIX}.{i}"), attn, cfg.d_ff))
                .collect(),
            ln_f: LayerNorm::at("encoder.ln_f", cfg.d_model),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        for c in &self.convs {
            c.linear.init(params, rng)?;
        }
        if let Some(p) = &self.proj {
            p.init(params, rng)?;
        }
        for l in &self.layers {
            l.init(params, rng)?;
        }
        self.ln_f.init(params)
    }

    pub fn total_stride(&self) -> usize {
        self.convs.iter().map(|c| c.spec.stride).product()
    }

    pub fn output_len(&self, frames: usize) -> usize {
        self.convs.iter().fold(frames, |t, c| c.spec.output_len(t))
    }

    /// `[T × d_feat]` features to `[T' × d_model]` encoder states.
    pub fn forward(&self, ctx: &mut ForwardCtx, feats: &Tensor) -> Result<NodeId> {
        let (t, _) = feats.dims2()?;
        if t == 0 {
            return Err(Error::invalid("empty feature matrix"));
        }
        let mut x = ctx.graph.constant(feats.clone());
        for c in &self.convs {
            let u = ctx.graph.unfold_frames(x, c.spec.kernel, c.spec.stride, c.spec.padding())?;
            let y = c.linear.forward(ctx, u)?;
            x = ctx.graph.gelu(y)?;
        }
        if let Some(p) = &self.proj {
            x = p.forward(ctx, x)?;
        }
        let len = ctx.graph.shape(x)[0];
        let pe = self.positions.forward(ctx, len)?;
        x = ctx.graph.add(x, pe)?;
        x = ctx.dropout(x)?;
        for l in &self.layers {
            x = l.forward(ctx, x)?;
        }
        self.ln_f.forward(ctx, x)
    }
}
