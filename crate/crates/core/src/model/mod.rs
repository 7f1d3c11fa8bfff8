//! Preformer assembly: encoder, CTC head, attention decoder variants and the causal LM,
//! together with parameter naming, donor initialization, freezing and parameter counting.

mod decoder;
mod encoder;
mod freeze;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use decoder::{AttentionSite, CausalLm, Decoder, DecoderKind, KvSource};
pub use encoder::{ConvSpec, W2vEncoder, CONTEXT_PREFIX, CONV_PREFIX};
pub use freeze::{apply_freeze_policy, FreezePolicy, LmGroupPolicy, Phase};
pub use params::{path_matches, ForwardCtx, ModelParams, Param};

use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{
    attention_param_count, ffn_param_count, layer_norm_param_count, AttentionConfig, CrossLayer, EncoderLayer,
    Linear, SelfLayer, VanillaDecoderLayer,
};
use crate::numerics::{Graph, NodeId, Tensor};

pub const CTC_PREFIX: &str = "ctc";

/// Token inventory: `n_chars` characters, then start and end markers for the decoder.
/// The CTC blank sits one past the decoder vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_chars: usize,
}

impl Vocab {
    pub fn new(n_chars: usize) -> Self {
        Self { n_chars }
    }

    pub fn sos(&self) -> usize {
        self.n_chars
    }

    pub fn eos(&self) -> usize {
        self.n_chars + 1
    }

    /// Decoder output size.
    pub fn size(&self) -> usize {
        self.n_chars + 2
    }

    pub fn blank(&self) -> usize {
        self.size()
    }

    pub fn ctc_classes(&self) -> usize {
        self.size() + 1
    }

    pub fn is_char(&self, t: usize) -> bool {
        t < self.n_chars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_chars: usize,
    pub d_feat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv: Vec<ConvSpec>,
    pub encoder_layers: usize,
    pub decoder: DecoderKind,
    /// Longest encoder output sequence (after the frontend).
    pub max_frames: usize,
    /// Longest decoder input, start token included.
    pub max_target_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: d=32, 4 heads, FFN 64, two stride-2 convolutions,
    /// two encoder layers, OCD with two self layers.
    pub fn toy(n_chars: usize) -> Self {
        Self {
            n_chars,
            d_feat: 8,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            conv: vec![
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    channels: 32,
                };
                2
            ],
            encoder_layers: 2,
            decoder: DecoderKind::Ocd { n_self: 2 },
            max_frames: 256,
            max_target_len: 64,
            dropout: 0.0,
        }
    }

    /// Full-size recognizer with a waveform frontend of seven convolutions, a 12-layer
    /// context network and a one-cross decoder with six self layers.
    pub fn full_scale_preformer() -> Self {
        let conv = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)]
            .into_iter()
            .map(|(kernel, stride)| ConvSpec {
                kernel,
                stride,
                channels: 512,
            })
            .collect();
        Self {
            n_chars: 4230,
            d_feat: 1,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            conv,
            encoder_layers: 12,
            decoder: DecoderKind::Ocd { n_self: 6 },
            max_frames: 4096,
            max_target_len: 1024,
            dropout: 0.0,
        }
    }

    /// Full-size filterbank baseline: two-convolution subsampling, 12 encoder layers and
    /// a six-layer vanilla decoder.
    pub fn full_scale_baseline() -> Self {
        Self {
            d_feat: 80,
            conv: vec![
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    channels: 768,
                };
                2
            ],
            decoder: DecoderKind::Vanilla { n_layers: 6 },
            ..Self::full_scale_preformer()
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_chars)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_model, self.n_heads)
    }

    pub fn total_stride(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    /// Analytic scalar count of a component, without instantiating it.
    pub fn param_count(&self, component: Component) -> usize {
        let d = self.d_model;
        let conv = {
            let mut c_in = self.d_feat;
            let mut n = 0;
            for c in &self.conv {
                n += c.kernel * c_in * c.channels + c.channels;
                c_in = c.channels;
            }
            (n, if c_in != d { c_in * d + d } else { 0 })
        };
        let (conv, proj) = conv;
        let encoder = conv + proj + self.encoder_layers * EncoderLayer::param_count(d, self.d_ff) + layer_norm_param_count(d);
        let v = self.vocab().size();
        let decoder_body = match self.decoder {
            DecoderKind::Ocd { n_self } | DecoderKind::Tcd { n_self } => {
                n_self * SelfLayer::param_count(d, self.d_ff)
                    + self.decoder.n_cross() * CrossLayer::param_count(d, self.d_ff)
            }
            DecoderKind::Vanilla { n_layers } => n_layers * VanillaDecoderLayer::param_count(d, self.d_ff),
        };
        let decoder = v * d + self.max_target_len * d + decoder_body + layer_norm_param_count(d) + d * v + v;
        let ctc = d * (v + 1) + v + 1;
        match component {
            Component::EncoderConv => conv,
            Component::Encoder => encoder,
            Component::Decoder => decoder,
            Component::CtcHead => ctc,
            Component::Total => encoder + decoder + ctc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    EncoderConv,
    Encoder,
    Decoder,
    CtcHead,
    Total,
}

impl Component {
    pub fn selector(&self) -> &'static str {
        match self {
            Component::EncoderConv => CONV_PREFIX,
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::CtcHead => CTC_PREFIX,
            Component::Total => "",
        }
    }
}

/// Parameters one decoder saves over another when a vanilla decoder of `n` layers is
/// replaced by `n` self layers and `n_cross` cross layers:
/// `n·(attention sublayer) − n_cross·(attention sublayer + feed-forward sublayer)`.
pub fn decoder_param_delta(d_model: usize, d_ff: usize, n: usize, n_cross: usize) -> isize {
    let attn = (attention_param_count(d_model) + layer_norm_param_count(d_model)) as isize;
    let ffn = (ffn_param_count(d_model, d_ff) + layer_norm_param_count(d_model)) as isize;
    n as isize * attn - n_cross as isize * (attn + ffn)
}

/// Encoder, CTC branch and attention decoder.
#[derive(Debug, Clone)]
pub struct Preformer {
    cfg: ModelConfig,
    encoder: W2vEncoder,
    ctc_head: Linear,
    decoder: Decoder,
}

/// Outputs of one [`Preformer::forward`] pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub encoder_out: NodeId,
    pub ctc_logits: NodeId,
    pub dec_logits: NodeId,
}

impl Preformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let attn = cfg.attention()?;
        if cfg.conv.is_empty() {
            return Err(Error::invalid("the encoder needs at least one convolution"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", cfg.dropout)));
        }
        let vocab = cfg.vocab();
        Ok(Self {
            encoder: W2vEncoder::new(&cfg, attn),
            ctc_head: Linear::at(CTC_PREFIX, cfg.d_model, vocab.ctc_classes()),
            decoder: Decoder::new(cfg.decoder, vocab, attn, cfg.d_ff, cfg.max_target_len),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.cfg.vocab()
    }

    pub fn encoder(&self) -> &W2vEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Fresh parameters; each component draws from its own seeded stream.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        let mut params = ModelParams::new();
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        self.encoder.init(&mut params, &mut stream(1))?;
        self.ctc_head.init(&mut params, &mut stream(2))?;
        self.decoder.init(&mut params, &mut stream(3))?;
        Ok(params)
    }

    pub fn encode(&self, ctx: &mut ForwardCtx, feats: &Tensor) -> Result<NodeId> {
        let (t, d) = feats.dims2()?;
        if t == 0 {
            return Err(Error::invalid("empty feature matrix"));
        }
        if d != self.cfg.d_feat {
            return Err(Error::shape("features", feats.shape(), &[t, self.cfg.d_feat]));
        }
        if t < self.cfg.total_stride() {
            return Err(Error::invalid(format!(
                "{t} frames is shorter than the frontend stride {}",
                self.cfg.total_stride()
            )));
        }
        self.encoder.forward(ctx, feats)
    }

    pub fn ctc_logits(&self, ctx: &mut ForwardCtx, encoder_out: NodeId) -> Result<NodeId> {
        self.ctc_head.forward(ctx, encoder_out)
    }

    pub fn decode_logits(&self, ctx: &mut ForwardCtx, prefix: &[usize], encoder_out: NodeId) -> Result<NodeId> {
        self.check_prefix(prefix)?;
        self.decoder.forward(ctx, prefix, encoder_out)
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        let vocab = self.vocab();
        if prefix.first() != Some(&vocab.sos()) {
            return Err(Error::invalid("decoder prefix must begin with the start token"));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::invalid(format!("token {bad} outside decoder vocabulary")));
        }
        Ok(())
    }

    /// Full forward pass: CTC logits `[T' × (V+1)]` and decoder logits `[L × V]` for the
    /// start-prefixed target.
    pub fn forward(&self, ctx: &mut ForwardCtx, feats: &Tensor, target_prefix: &[usize]) -> Result<ForwardOutput> {
        self.check_prefix(target_prefix)?;
        let encoder_out = self.encode(ctx, feats)?;
        let ctc_logits = self.ctc_logits(ctx, encoder_out)?;
        let dec_logits = self.decoder.forward(ctx, target_prefix, encoder_out)?;
        Ok(ForwardOutput {
            encoder_out,
            ctc_logits,
            dec_logits,
        })
    }

    /// Evaluates [`Preformer::forward`] without gradient tracking and returns the logits.
    pub fn preformer_forward(&self, params: &ModelParams, feats: &Tensor, target_prefix: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, params, false);
        let out = self.forward(&mut ctx, feats, target_prefix)?;
        Ok((g.value(out.ctc_logits).clone(), g.value(out.dec_logits).clone()))
    }

    /// Copies the decoder's LM-initializable group (embedding, positions, self layers,
    /// final norm) from `donor`. Everything is validated before anything is written.
    pub fn init_from_lm(&self, params: &mut ModelParams, donor: &Checkpoint) -> Result<()> {
        let selectors = self.decoder.lm_group_selectors();
        if selectors.is_empty() {
            return Err(Error::invalid("the vanilla decoder has no LM-initializable group"));
        }
        let targets: Vec<String> = params
            .paths()
            .filter(|p| selectors.iter().any(|s| path_matches(p, s)))
            .map(str::to_string)
            .collect();
        copy_group(params, donor, &targets)
    }

    /// Copies every `encoder.*` tensor from `donor`.
    pub fn init_encoder_from(&self, params: &mut ModelParams, donor: &Checkpoint) -> Result<()> {
        let targets: Vec<String> = params
            .paths()
            .filter(|p| path_matches(p, "encoder"))
            .map(str::to_string)
            .collect();
        copy_group(params, donor, &targets)
    }
}

fn copy_group(params: &mut ModelParams, donor: &Checkpoint, targets: &[String]) -> Result<()> {
    for path in targets {
        let src = donor.get(path).ok_or_else(|| Error::MissingParam(path.clone()))?;
        let dst = params.tensor(path)?;
        if src.shape() != dst.shape() {
            return Err(Error::ParamShape {
                path: path.clone(),
                donor: src.shape().to_vec(),
                target: dst.shape().to_vec(),
            });
        }
    }
    for path in targets {
        let src = donor.get(path).expect("validated above");
        params.copy_from(path, src)?;
    }
    Ok(())
}
