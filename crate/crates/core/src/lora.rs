//! Low-rank adaptation of the text cross-attention query and value projections.
//!
//! The effective weight is `W + scale · Aᵀ B` with `A: r×d_in` and
//! `B: r×d_out`. `B` starts at zero, so a fresh adapter leaves the frozen
//! projection unchanged; the key projection is never adapted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::lm::{bind, cross_attention_graph, BaseModel, LmConfig, TextEmbedding};
use crate::params::param_tree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, scale: 1.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if !self.scale.is_finite() {
            return Err(Error::config("LoRA scale must be finite"));
        }
        Ok(())
    }

    /// Closed-form size of a [`LoraSet`]: two pairs per layer.
    pub fn parameter_count(&self, base: &LmConfig) -> usize {
        let d = base.d_model;
        base.n_layers * 2 * (self.rank * d + self.rank * d)
    }
}

param_tree! {
    pub struct LoraPair { leaf a: P, leaf b: P }
}

param_tree! {
    /// Adapters for one layer's cross-attention `W'_Q` and `W'_V`.
    pub struct LoraLayer { node q: LoraPair<P>, node v: LoraPair<P> }
}

param_tree! {
    pub struct LoraSet { nodes layers: Vec<LoraLayer<P>> }
}

pub fn init_lora(base: &LmConfig, cfg: &LoraConfig, seed: u64) -> Result<LoraSet> {
    cfg.validate()?;
    let d = base.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite standard deviation");
    let pair = |rng: &mut ChaCha8Rng| LoraPair {
        a: Mat::from_shape_simple_fn((cfg.rank, d), || rng.sample(dist)),
        b: Mat::zeros((cfg.rank, d)),
    };
    let layers = (0..base.n_layers).map(|_| LoraLayer { q: pair(&mut rng), v: pair(&mut rng) }).collect();
    Ok(LoraSet { layers })
}

/// `w + scale · Aᵀ B`; `w` is not modified.
pub fn apply_lora(w: &Mat, pair: &LoraPair, scale: f64) -> Result<Mat> {
    let (r, d_in) = pair.a.dim();
    if pair.b.nrows() != r || w.dim() != (d_in, pair.b.ncols()) {
        return Err(Error::input(format!(
            "LoRA shapes A {:?}, B {:?} do not fit weight {:?}",
            pair.a.dim(),
            pair.b.dim(),
            w.dim()
        )));
    }
    Ok(w + &(pair.a.t().dot(&pair.b) * scale))
}

pub(crate) fn lora_weight_graph(g: &mut Graph<'_>, w: Var, pair: &LoraPair<Var>, scale: f64) -> Var {
    let at = g.transpose(pair.a);
    let delta = g.matmul(at, pair.b);
    let delta = g.scale(delta, scale);
    g.add(w, delta)
}

/// Cross-attention sublayer of layer `layer` with adapted `W'_Q` and `W'_V`.
/// `music_states` is the (normalized) music stream entering the sublayer.
pub fn lora_cross_attention(
    music_states: &Mat,
    instruct: &TextEmbedding,
    layer: usize,
    base: &BaseModel,
    lora: &LoraSet,
    cfg: &LoraConfig,
) -> Result<Mat> {
    let d = base.config.d_model;
    if layer >= base.config.n_layers || layer >= lora.layers.len() {
        return Err(Error::input(format!("layer {layer} out of range")));
    }
    if music_states.ncols() != d || instruct.values.ncols() != d {
        return Err(Error::input("music and text widths must equal d_model"));
    }
    let instruct = TextEmbedding::new(instruct.values.clone(), instruct.mask.clone())?;
    let mut g = Graph::new();
    let w = bind(&mut g, &base.weights, false);
    let l = lora.map("", &mut |_, m| g.param(m, false));
    let c = g.constant(music_states.clone());
    let text = g.constant(instruct.values);
    let block = &w.blocks[layer].cross_attn;
    let w_q = lora_weight_graph(&mut g, block.w_q, &l.layers[layer].q, cfg.scale);
    let w_v = lora_weight_graph(&mut g, block.w_v, &l.layers[layer].v, cfg.scale);
    let mask = AttentionMask { causal: false, keys: Some(&instruct.mask) };
    let out = cross_attention_graph(&mut g, base.config.n_heads, c, text, mask, w_q, block.w_k, w_v, block.w_o);
    Ok(g.value(out).clone())
}
