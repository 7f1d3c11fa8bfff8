use rand::Rng;

use super::Vocab;
use crate::error::{Error, Result};
use crate::layers::{
    AttentionConfig, CrossLayer, LayerNorm, Linear, PositionalEncoding, SelfLayer, VanillaDecoderLayer,
};
use crate::model::params::{ForwardCtx, ModelParams};
use crate::numerics::{NodeId, Tensor};

pub const EMBED_PATH: &str = "decoder.embed";
pub const POS_PATH: &str = "decoder.pos";
pub const SELF_PREFIX: &str = "decoder.self";
pub const CROSS_PREFIX: &str = "decoder.cross";
pub const VANILLA_PREFIX: &str = "decoder.layers";
pub const FINAL_NORM_PREFIX: &str = "decoder.ln_f";
pub const OUT_PREFIX: &str = "decoder.out";
pub const LM_HEAD_PREFIX: &str = "lm_head";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// `n_self` self layers then exactly one cross layer.
    Ocd { n_self: usize },
    /// `n_self` self layers then two cross layers.
    Tcd { n_self: usize },
    /// `n_layers` layers that each carry self- and cross-attention.
    Vanilla { n_layers: usize },
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Ocd { .. } => "ocd",
            DecoderKind::Tcd { .. } => "tcd",
            DecoderKind::Vanilla { .. } => "vanilla",
        }
    }

    pub fn n_cross(&self) -> usize {
        match self {
            DecoderKind::Ocd { .. } => 1,
            DecoderKind::Tcd { .. } => 2,
            DecoderKind::Vanilla { .. } => 0,
        }
    }

    pub fn n_self(&self) -> usize {
        match self {
            DecoderKind::Ocd { n_self } | DecoderKind::Tcd { n_self } => *n_self,
            DecoderKind::Vanilla { .. } => 0,
        }
    }
}

/// Where an attention block reads its keys and values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvSource {
    Decoder,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSite {
    pub path: String,
    pub kv_source: KvSource,
}

/// Shared embedding + causal self-layer stack, the part of a decoder that never sees the
/// encoder. A causal LM uses the same paths so its weights transfer verbatim.
#[derive(Debug, Clone)]
pub struct TextStack {
    vocab: Vocab,
    d_model: usize,
    positions: PositionalEncoding,
    self_layers: Vec<SelfLayer>,
}

impl TextStack {
    pub fn new(vocab: Vocab, attn: AttentionConfig, d_ff: usize, n_self: usize, max_len: usize) -> Self {
        Self {
            vocab,
            d_model: attn.d_model,
            positions: PositionalEncoding::Learned {
                path: POS_PATH.to_string(),
                max_len,
                d_model: attn.d_model,
            },
            self_layers: (0..n_self)
                .map(|i| SelfLayer::at(&format!("{SELF_PREFIX}.{i}"), attn, d_ff))
                .collect(),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        params.insert(EMBED_PATH, Tensor::randn(&[self.vocab.size(), self.d_model], 0.3, rng))?;
        self.positions.init(params, rng)?;
        for l in &self.self_layers {
            l.init(params, rng)?;
        }
        Ok(())
    }

    pub fn embed(&self, ctx: &mut ForwardCtx, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token prefix"));
        }
        let table = ctx.param(EMBED_PATH)?;
        let x = ctx.graph.gather_rows(table, tokens)?;
        let pe = self.positions.forward(ctx, tokens.len())?;
        let x = ctx.graph.add(x, pe)?;
        ctx.dropout(x)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, tokens: &[usize]) -> Result<NodeId> {
        let mut x = self.embed(ctx, tokens)?;
        for l in &self.self_layers {
            x = l.forward(ctx, x)?;
        }
        Ok(x)
    }

    pub fn n_self(&self) -> usize {
        self.self_layers.len()
    }

    pub fn max_len(&self) -> usize {
        self.positions.max_len()
    }
}

/// Attention decoder in one of the three [`DecoderKind`] arrangements.
#[derive(Debug, Clone)]
pub struct Decoder {
    kind: DecoderKind,
    text: TextStack,
    cross_layers: Vec<CrossLayer>,
    vanilla_layers: Vec<VanillaDecoderLayer>,
    ln_f: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new(kind: DecoderKind, vocab: Vocab, attn: AttentionConfig, d_ff: usize, max_len: usize) -> Self {
        let n_vanilla = match kind {
            DecoderKind::Vanilla { n_layers } => n_layers,
            _ => 0,
        };
        Self {
            kind,
            text: TextStack::new(vocab, attn, d_ff, kind.n_self(), max_len),
            cross_layers: (0..kind.n_cross())
                .map(|i| CrossLayer::at(&format!("{CROSS_PREFIX}.{i}"), attn, d_ff))
                .collect(),
            vanilla_layers: (0..n_vanilla)
                .map(|i| VanillaDecoderLayer::at(&format!("{VANILLA_PREFIX}.{i}"), attn, d_ff))
                .collect(),
            ln_f: LayerNorm::at(FINAL_NORM_PREFIX, attn.d_model),
            out: Linear::at(OUT_PREFIX, attn.d_model, vocab.size()),
        }
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.text.init(params, rng)?;
        for l in &self.cross_layers {
            l.init(params, rng)?;
        }
        for l in &self.vanilla_layers {
            l.init(params, rng)?;
        }
        self.ln_f.init(params)?;
        self.out.init(params, rng)
    }

    /// Logits `[L × V]` for every position of `tokens` given encoder states `memory`.
    pub fn forward(&self, ctx: &mut ForwardCtx, tokens: &[usize], memory: NodeId) -> Result<NodeId> {
        let mut x = self.text.forward(ctx, tokens)?;
        for l in &self.vanilla_layers {
            x = l.forward(ctx, x, memory)?;
        }
        for l in &self.cross_layers {
            x = l.forward(ctx, x, memory)?;
        }
        let x = self.ln_f.forward(ctx, x)?;
        self.out.forward(ctx, x)
    }

    /// Selectors of the parameters that a causal-LM donor can initialize: embedding,
    /// positions, self layers and the final norm. Empty for the vanilla decoder.
    pub fn lm_group_selectors(&self) -> Vec<String> {
        if self.text.n_self() == 0 {
            return Vec::new();
        }
        let mut s = vec![EMBED_PATH.to_string(), POS_PATH.to_string()];
        s.extend((0..self.text.n_self()).map(|i| format!("{SELF_PREFIX}.{i}")));
        s.push(FINAL_NORM_PREFIX.to_string());
        s
    }

    pub fn self_layer_selector(i: usize) -> String {
        format!("{SELF_PREFIX}.{i}")
    }

    pub fn n_self(&self) -> usize {
        self.text.n_self()
    }

    pub fn max_len(&self) -> usize {
        self.text.max_len()
    }

    pub fn attention_sites(&self) -> Vec<AttentionSite> {
        let site = |path: String, kv_source| AttentionSite { path, kv_source };
        let mut sites: Vec<AttentionSite> = (0..self.text.n_self())
            .map(|i| site(format!("{SELF_PREFIX}.{i}.attn"), KvSource::Decoder))
            .collect();
        for i in 0..self.vanilla_layers.len() {
            sites.push(site(format!("{VANILLA_PREFIX}.{i}.self_attn"), KvSource::Decoder));
            sites.push(site(format!("{VANILLA_PREFIX}.{i}.cross_attn"), KvSource::Encoder));
        }
        for i in 0..self.cross_layers.len() {
            sites.push(site(format!("{CROSS_PREFIX}.{i}.attn"), KvSource::Encoder));
        }
        sites
    }
}

/// Decoder-only language model whose body shares parameter paths with a decoder's
/// LM-initializable group, plus its own output head.
#[derive(Debug, Clone)]
pub struct CausalLm {
    vocab: Vocab,
    text: TextStack,
    ln_f: LayerNorm,
    head: Linear,
}

impl CausalLm {
    pub fn new(vocab: Vocab, attn: AttentionConfig, d_ff: usize, n_self: usize, max_len: usize) -> Self {
        Self {
            vocab,
            text: TextStack::new(vocab, attn, d_ff, n_self, max_len),
            ln_f: LayerNorm::at(FINAL_NORM_PREFIX, attn.d_model),
            head: Linear::at(LM_HEAD_PREFIX, attn.d_model, vocab.size()),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.text.max_len()
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.text.init(params, rng)?;
        self.ln_f.init(params)?;
        self.head.init(params, rng)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, tokens: &[usize]) -> Result<NodeId> {
        let x = self.text.forward(ctx, tokens)?;
        let x = self.ln_f.forward(ctx, x)?;
        self.head.forward(ctx, x)
    }

    /// Selectors of the donor group (everything except the LM head).
    pub fn donor_selectors(&self) -> Vec<String> {
        let mut s = vec![EMBED_PATH.to_string(), POS_PATH.to_string()];
        s.extend((0..self.text.n_self()).map(|i| format!("{SELF_PREFIX}.{i}")));
        s.push(FINAL_NORM_PREFIX.to_string());
        s
    }

    /// Log-probabilities over the vocabulary for the token following `prefix`.
    pub fn next_log_probs(&self, params: &ModelParams, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = crate::numerics::Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, params, false);
        let logits = self.forward(&mut ctx, prefix)?;
        let lp = ctx.graph.log_softmax(logits)?;
        let v = self.vocab.size();
        let data = ctx.graph.value(lp).data();
        Ok(data[data.len() - v..].to_vec())
    }
}
