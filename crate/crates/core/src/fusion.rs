//! Audio fusion: a condition stream through frozen copies of the base
//! self-attention weights, merged into the music stream by gated attention.
//!
//! For layer `m = 1..M` the condition stream computes
//!
//! ```text
//! in_m = LN_m(z_{m-1} + Linear_m(z_cond) + e_m)
//! Q'_m, K'_m, V'_m = in_m W_Q^m, in_m W_K^m, in_m W_V^m
//! z_m  = CausalAttention(Q'_m, K'_m, V'_m) W_O^m
//! ```
//!
//! with `z_0` the learned row `z0_cond` repeated over time and `z_cond` the
//! summed codebook embeddings of the condition grid. `LN_m` is the frozen
//! pre-attention norm of base layer `m`, so the duplicated sublayer sees
//! inputs on the scale it was trained on. The music stream's
//! self-attention output `O` is then replaced by
//! `O + g_m · Attention(Q + Q'_m, K'_m, V'_m) W_O^m` before its residual add.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Mat, Var};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::lm::{
    bind, decode_autoregressive, decoder_graph, embed_graph, last_rows, layer_norm, shifted_input_graph, BaseModel, BaseWeights,
    sinusoidal_positions, LayerHooks, LmConfig, Logits, Sampling, TextEmbedding,
};
use crate::lora::{init_lora, lora_weight_graph, LoraConfig, LoraSet};
use crate::params::param_tree;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Longest supported sequence; rows of each position table.
    pub t_max: usize,
    /// Replace each `d×d` condition linear by `d×b` followed by `b×d`.
    pub bottleneck: Option<usize>,
    pub position_init: PositionInit,
}

/// Starting values of the per-layer condition position tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionInit {
    /// Small Gaussian noise.
    #[default]
    Random,
    /// The base model's sinusoidal table, so condition frame `t` starts out
    /// positioned like music frame `t`.
    Sinusoidal,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { t_max: 250, bottleneck: None, position_init: PositionInit::Random }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.bottleneck == Some(0) {
            return Err(Error::config("t_max and bottleneck width must be positive"));
        }
        Ok(())
    }

    /// Size of the condition linear stack alone.
    pub fn linear_parameter_count(&self, base: &LmConfig) -> usize {
        let d = base.d_model;
        base.n_layers * self.bottleneck.map_or(d * d, |b| 2 * d * b)
    }

    /// Closed-form size of [`FusionParams`].
    pub fn parameter_count(&self, base: &LmConfig) -> usize {
        let d = base.d_model;
        d + self.linear_parameter_count(base) + base.n_layers * self.t_max * d + base.n_layers
    }
}

param_tree! {
    /// `Linear_cond` of one layer as a product of factors (one for the full
    /// variant, two for the bottleneck); no bias.
    pub struct CondLinear { leaves factors: Vec<P> }
}

param_tree! {
    pub struct FusionParams {
        /// `1×d` condition input row.
        leaf z0_cond: P,
        nodes linear_cond: Vec<CondLinear<P>>,
        /// `t_max×d` position table per layer.
        leaves pos_embeddings: Vec<P>,
        /// `1×1` gate per layer.
        leaves gates: Vec<P>,
    }
}

param_tree! {
    /// Everything trained during instruction finetuning.
    pub struct AdapterWeights { node fusion: FusionParams<P>, node lora: LoraSet<P> }
}

pub fn init_fusion(base: &LmConfig, cfg: &FusionConfig, seed: u64) -> Result<FusionParams> {
    cfg.validate()?;
    let d = base.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        Mat::from_shape_simple_fn((rows, cols), || rng.sample(dist))
    };
    let z0_cond = random(1, d, 0.02);
    let linear_cond = (0..base.n_layers)
        .map(|_| CondLinear {
            factors: match cfg.bottleneck {
                None => vec![random(d, d, 1.0 / (d as f64).sqrt())],
                Some(b) => vec![random(d, b, 1.0 / (d as f64).sqrt()), random(b, d, 1.0 / (b as f64).sqrt())],
            },
        })
        .collect();
    let pos_embeddings = (0..base.n_layers)
        .map(|_| match cfg.position_init {
            PositionInit::Random => random(cfg.t_max, d, 0.02),
            PositionInit::Sinusoidal => sinusoidal_positions(cfg.t_max, d),
        })
        .collect();
    let gates = (0..base.n_layers).map(|_| Mat::zeros((1, 1))).collect();
    Ok(FusionParams { z0_cond, linear_cond, pos_embeddings, gates })
}

/// Condition-stream activations and per-layer projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionStates {
    /// `z_0 ..= z_M`.
    pub states: Vec<Mat>,
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
}

pub(crate) struct ConditionVars {
    pub states: Vec<Var>,
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

pub(crate) fn condition_graph(
    g: &mut Graph<'_>,
    cfg: &LmConfig,
    base: &BaseWeights<Var>,
    fusion: &FusionParams<Var>,
    z_cond: Var,
) -> ConditionVars {
    let t = g.value(z_cond).nrows();
    let mut z = g.broadcast_rows(fusion.z0_cond, t);
    let mut out = ConditionVars { states: vec![z], q: Vec::new(), k: Vec::new(), v: Vec::new() };
    for (m, block) in base.blocks.iter().enumerate() {
        let mut lin = z_cond;
        for &f in &fusion.linear_cond[m].factors {
            lin = g.matmul(lin, f);
        }
        let e = g.rows(fusion.pos_embeddings[m], 0, t);
        let input = g.add(z, lin);
        let input = g.add(input, e);
        let input = layer_norm(g, input, &block.ln_self);
        let q = g.matmul(input, block.self_attn.w_q);
        let k = g.matmul(input, block.self_attn.w_k);
        let v = g.matmul(input, block.self_attn.w_v);
        let att = g.attention(q, k, v, cfg.n_heads, AttentionMask::CAUSAL);
        z = g.matmul(att, block.self_attn.w_o);
        out.states.push(z);
        out.q.push(q);
        out.k.push(k);
        out.v.push(v);
    }
    out
}

fn check_length(t: usize, cfg: &FusionConfig) -> Result<()> {
    if t > cfg.t_max {
        return Err(Error::config(format!("sequence of {t} frames exceeds t_max = {}", cfg.t_max)));
    }
    Ok(())
}

/// Runs the condition stream over `cond_embedding` (`T×d` summed embeddings).
pub fn condition_forward(
    cond_embedding: &Mat,
    fusion: &FusionParams,
    cfg: &FusionConfig,
    base: &BaseModel,
) -> Result<ConditionStates> {
    check_length(cond_embedding.nrows(), cfg)?;
    if cond_embedding.ncols() != base.config.d_model || cond_embedding.nrows() == 0 {
        return Err(Error::input("condition embedding must be T×d_model with T >= 1"));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, &base.weights, false);
    let f = fusion.map("", &mut |_, m| g.param(m, false));
    let z = g.constant(cond_embedding.clone());
    let c = condition_graph(&mut g, &base.config, &w, &f, z);
    let values = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
    Ok(ConditionStates { states: values(&c.states), q: values(&c.q), k: values(&c.k), v: values(&c.v) })
}

/// `O + gate · Attention(Q + Q', K', V') W_O`, where `q_cond` may hold more
/// rows than `q` (only the first `q.rows` are used).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fuse_graph(
    g: &mut Graph<'_>,
    heads: usize,
    q: Var,
    o: Var,
    q_cond: Var,
    k_cond: Var,
    v_cond: Var,
    w_o: Var,
    gate: Var,
) -> Var {
    let t = g.value(q).nrows();
    let q_cond = if g.value(q_cond).nrows() == t { q_cond } else { g.rows(q_cond, 0, t) };
    let qs = g.add(q, q_cond);
    let att = g.attention(qs, k_cond, v_cond, heads, AttentionMask::NONE);
    let o2 = g.matmul(att, w_o);
    let gated = g.scale_by(o2, gate);
    g.add(o, gated)
}

/// Result of [`fused_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusedAttention {
    /// Plain causal self-attention output.
    pub o: Mat,
    /// Condition cross-attention output before gating.
    pub o_cond: Mat,
    pub o_fuse: Mat,
}

/// One fused attention sublayer on explicit projections.
#[allow(clippy::too_many_arguments)]
pub fn fused_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    q_cond: &Mat,
    k_cond: &Mat,
    v_cond: &Mat,
    w_o: &Mat,
    gate: f64,
    heads: usize,
) -> Result<FusedAttention> {
    if q.dim() != q_cond.dim() || k_cond.nrows() != q.nrows() || v_cond.nrows() != q.nrows() {
        return Err(Error::input(format!(
            "music ({}) and condition ({}) sequence lengths differ",
            q.nrows(),
            q_cond.nrows()
        )));
    }
    if heads == 0 || !q.ncols().is_multiple_of(heads) || k.dim() != q.dim() || v.nrows() != q.nrows() {
        return Err(Error::input("attention operand shapes do not conform"));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (qc, kc, vc) = (g.constant(q_cond.clone()), g.constant(k_cond.clone()), g.constant(v_cond.clone()));
    let wo = g.constant(w_o.clone());
    let att = g.attention(qv, kv, vv, heads, AttentionMask::CAUSAL);
    let o = g.matmul(att, wo);
    let unit = g.constant(Mat::ones((1, 1)));
    let zero = g.constant(Mat::zeros((1, 1)));
    let zeros = g.scale_by(o, zero);
    let o_cond = fuse_graph(&mut g, heads, qv, zeros, qc, kc, vc, wo, unit);
    let gate_v = g.constant(Mat::from_elem((1, 1), gate));
    let o_fuse = fuse_graph(&mut g, heads, qv, o, qc, kc, vc, wo, gate_v);
    Ok(FusedAttention { o: g.value(o).clone(), o_cond: g.value(o_cond).clone(), o_fuse: g.value(o_fuse).clone() })
}

/// Trainable adapters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters {
    pub fusion_config: FusionConfig,
    pub lora_config: LoraConfig,
    /// When false the LoRA deltas are not applied (and not trained).
    pub text_fusion: bool,
    pub weights: AdapterWeights,
}

impl Adapters {
    pub fn init(
        base: &LmConfig,
        fusion_config: &FusionConfig,
        lora_config: &LoraConfig,
        text_fusion: bool,
        seed: u64,
    ) -> Result<Self> {
        let fusion = init_fusion(base, fusion_config, seed)?;
        let lora = init_lora(base, lora_config, seed ^ 0x10ba)?;
        Ok(Self {
            fusion_config: fusion_config.clone(),
            lora_config: lora_config.clone(),
            text_fusion,
            weights: AdapterWeights { fusion, lora },
        })
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit("", &mut |_, m| n += m.len());
        n
    }

    /// Checks every tensor shape against `base` and this configuration.
    pub fn check_against(&self, base: &LmConfig) -> Result<()> {
        let reference = Self::init(base, &self.fusion_config, &self.lora_config, self.text_fusion, 0)?;
        let mut expected = Vec::new();
        reference.weights.visit("", &mut |n, m| expected.push((n.to_string(), m.dim())));
        let mut found = Vec::new();
        self.weights.visit("", &mut |n, m| found.push((n.to_string(), m.dim())));
        if expected != found {
            return Err(Error::config("adapter tensors do not match the model configuration"));
        }
        Ok(())
    }
}

/// Layer hooks that apply fusion and (optionally) LoRA inside the decoder.
pub(crate) struct AdapterHooks<'c> {
    pub heads: usize,
    pub cond: &'c ConditionVars,
    pub gates: Vec<Var>,
    pub lora: Option<(LoraSet<Var>, f64)>,
}

impl LayerHooks for AdapterHooks<'_> {
    fn self_attention(&mut self, g: &mut Graph<'_>, layer: usize, q: Var, o: Var, w_o: Var) -> Var {
        let c = self.cond;
        fuse_graph(g, self.heads, q, o, c.q[layer], c.k[layer], c.v[layer], w_o, self.gates[layer])
    }

    fn cross_projections(&mut self, g: &mut Graph<'_>, layer: usize, w_q: Var, w_v: Var) -> (Var, Var) {
        match &self.lora {
            Some((l, scale)) => (
                lora_weight_graph(g, w_q, &l.layers[layer].q, *scale),
                lora_weight_graph(g, w_v, &l.layers[layer].v, *scale),
            ),
            None => (w_q, w_v),
        }
    }
}

/// Validates the inputs shared by the fused forward and generation.
fn check_inputs(base: &BaseModel, adapters: &Adapters, condition: &TokenGrid, text: &TextEmbedding) -> Result<()> {
    base.check_grid(condition)?;
    base.check_text(text)?;
    check_length(condition.frames(), &adapters.fusion_config)
}

/// Builds the fused decoder on `g` over the music input `x` (`T×d`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fused_graph(
    g: &mut Graph<'_>,
    cfg: &LmConfig,
    base: &BaseWeights<Var>,
    adapters: &AdapterWeights<Var>,
    lora_scale: Option<f64>,
    cond_tokens: ArrayView2<u32>,
    x: Var,
    text: Var,
    text_mask: &[bool],
) -> Vec<Var> {
    let z_cond = embed_graph(g, base, cond_tokens);
    let cond = condition_graph(g, cfg, base, &adapters.fusion, z_cond);
    let mut hooks = AdapterHooks {
        heads: cfg.n_heads,
        cond: &cond,
        gates: adapters.fusion.gates.clone(),
        lora: lora_scale.map(|s| (adapters.lora.clone(), s)),
    };
    decoder_graph(g, cfg, base, x, text, text_mask, &mut hooks).logits
}

/// Teacher-forced logits of the fused model: position `t` predicts
/// `target[:, t]` from `target[:, ..t]`, the full condition and the instruction.
pub fn fused_decoder_forward(
    target: &TokenGrid,
    condition: &TokenGrid,
    instruction: &TextEmbedding,
    base: &BaseModel,
    adapters: &Adapters,
) -> Result<Logits> {
    check_inputs(base, adapters, condition, instruction)?;
    base.check_grid(target)?;
    if target.frames() != condition.frames() {
        return Err(Error::input(format!(
            "target has {} frames but condition has {}",
            target.frames(),
            condition.frames()
        )));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, &base.weights, false);
    let a = adapters.weights.map("", &mut |_, m| g.param(m, false));
    let x = shifted_input_graph(&mut g, &w, target.tokens().slice(ndarray::s![.., ..target.frames() - 1]));
    let text = g.constant(instruction.values.clone());
    let lora_scale = adapters.text_fusion.then_some(adapters.lora_config.scale);
    let logits = fused_graph(&mut g, &base.config, &w, &a, lora_scale, condition.tokens().view(), x, text, &instruction.mask);
    Ok(Logits(logits.iter().map(|&v| g.value(v).clone()).collect()))
}

/// Autoregressively generates an edited grid as long as `condition`.
pub fn generate_edit(
    condition: &TokenGrid,
    instruction: &TextEmbedding,
    base: &BaseModel,
    adapters: &Adapters,
    sampling: &Sampling,
) -> Result<TokenGrid> {
    check_inputs(base, adapters, condition, instruction)?;
    let cfg = &base.config;
    let cond = condition_forward(&base.embed_tokens(condition)?, &adapters.weights.fusion, &adapters.fusion_config, base)?;
    let lora_scale = adapters.text_fusion.then_some(adapters.lora_config.scale);
    let tokens = decode_autoregressive(cfg.n_codebooks, condition.frames(), sampling, |prefix| {
        let mut g = Graph::new();
        let w = bind(&mut g, &base.weights, false);
        let a = adapters.weights.map("", &mut |_, m| g.param(m, false));
        let mut consts = |ms: &[Mat]| ms.iter().map(|m| g.constant(m.clone())).collect::<Vec<_>>();
        let vars = ConditionVars { states: Vec::new(), q: consts(&cond.q), k: consts(&cond.k), v: consts(&cond.v) };
        let x = shifted_input_graph(&mut g, &w, prefix);
        let text = g.constant(instruction.values.clone());
        let mut hooks = AdapterHooks {
            heads: cfg.n_heads,
            cond: &vars,
            gates: a.fusion.gates.clone(),
            lora: lora_scale.map(|s| (a.lora.clone(), s)),
        };
        let out = decoder_graph(&mut g, cfg, &w, x, text, &instruction.mask, &mut hooks);
        Ok(last_rows(&g, &out.logits))
    })?;
    TokenGrid::new(tokens, cfg.codebook_size, condition.frame_rate())
}
