//! Frozen base model: a causal decoder over token grids with per-layer text
//! cross-attention, and the small bidirectional text encoder feeding it.
//!
//! All `N` codebooks of a frame are predicted in parallel by `N` output heads.
//! The decoder input at position `t` is a learned start row for `t = 0` and the
//! summed codebook embeddings of frame `t - 1` otherwise, plus sinusoidal
//! positions.

use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Mat, Var};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::optim::{self, AdamState, AdamWConfig};
use crate::params::param_tree;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub text_max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_codebooks: 4,
            codebook_size: 64,
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            text_layers: 2,
            text_max_len: 16,
        }
    }
}

impl LmConfig {
    /// Dimensions used only for parameter accounting.
    pub fn full_scale() -> Self {
        Self {
            n_codebooks: 4,
            codebook_size: 2048,
            n_layers: 48,
            d_model: 2048,
            n_heads: 32,
            ffn_dim: 8192,
            text_layers: 2,
            text_max_len: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_codebooks,
            self.codebook_size,
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.ffn_dim,
            self.text_max_len,
        ];
        if positive.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form size of [`BaseWeights`].
    pub fn base_parameter_count(&self) -> usize {
        let (d, f, l, n) = (self.d_model, self.ffn_dim, self.codebook_size, self.n_codebooks);
        let ln = 2 * d;
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let decoder_block = 3 * ln + 2 * attn + ffn;
        let text_block = 2 * ln + attn + ffn;
        let text = VOCABULARY.len() * d + self.text_max_len * d + self.text_layers * text_block + ln;
        n * l * d + d + self.n_layers * decoder_block + ln + n * d * l + text
    }
}

param_tree! {
    pub struct LayerNormParams { leaf gamma: P, leaf beta: P }
}

param_tree! {
    /// Projections of one attention sublayer; no biases.
    pub struct AttentionWeights { leaf w_q: P, leaf w_k: P, leaf w_v: P, leaf w_o: P }
}

param_tree! {
    pub struct FeedForward { leaf w_in: P, leaf b_in: P, leaf w_out: P, leaf b_out: P }
}

param_tree! {
    pub struct DecoderBlock {
        node ln_self: LayerNormParams<P>,
        node self_attn: AttentionWeights<P>,
        node ln_cross: LayerNormParams<P>,
        node cross_attn: AttentionWeights<P>,
        node ln_ffn: LayerNormParams<P>,
        node ffn: FeedForward<P>,
    }
}

param_tree! {
    pub struct TextBlock {
        node ln_attn: LayerNormParams<P>,
        node attn: AttentionWeights<P>,
        node ln_ffn: LayerNormParams<P>,
        node ffn: FeedForward<P>,
    }
}

param_tree! {
    pub struct TextEncoderParams {
        leaf token_embedding: P,
        leaf position_embedding: P,
        nodes blocks: Vec<TextBlock<P>>,
        node ln_final: LayerNormParams<P>,
    }
}

param_tree! {
    pub struct BaseWeights {
        /// One `L×d` table per codebook.
        leaves embeddings: Vec<P>,
        /// Start-of-sequence input row.
        leaf sos: P,
        nodes blocks: Vec<DecoderBlock<P>>,
        node ln_final: LayerNormParams<P>,
        /// One `d×L` projection per codebook.
        leaves heads: Vec<P>,
        node text: TextEncoderParams<P>,
    }
}

/// Fixed instruction/description vocabulary. Index 0 is padding, 1 unknown.
pub const VOCABULARY: &[&str] = &[
    "<pad>", "<unk>", "add", "remove", "extract", "only", "no", "and", "with", "without", "the", "a", "drums",
    "bass", "piano", "guitar", "keys", "strings", "vocals", "synth", "other", "music", "stem", "track",
];
const ALIASES: &[(&str, &str)] = &[("drum", "drums"), ("guitars", "guitar"), ("pianos", "piano")];
const UNK: usize = 1;

/// Lowercases, strips punctuation and maps words to vocabulary ids.
pub fn tokenize(text: &str, max_len: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = ALIASES.iter().find(|(from, _)| *from == w).map_or(w.as_str(), |(_, to)| to);
            VOCABULARY.iter().position(|v| *v == w).unwrap_or(UNK)
        })
        .take(max_len)
        .collect();
    if ids.is_empty() {
        return Err(Error::input(format!("instruction {text:?} contains no words")));
    }
    Ok(ids)
}

/// Encoded instruction or description.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// `S×d` encoder output.
    pub values: Mat,
    /// `false` marks padding positions.
    pub mask: Vec<bool>,
}

impl TextEmbedding {
    pub fn new(values: Mat, mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != mask.len() {
            return Err(Error::input("text mask length does not match embedding rows"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::input("text embedding is fully masked"));
        }
        Ok(Self { values, mask })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Per-codebook `T×L` logit matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<Mat>);

impl Logits {
    pub fn n_codebooks(&self) -> usize {
        self.0.len()
    }

    pub fn frames(&self) -> usize {
        self.0.first().map_or(0, |m| m.nrows())
    }

    pub fn codebook(&self, n: usize) -> &Mat {
        &self.0[n]
    }

    /// Highest-scoring token per cell; ties go to the lowest index.
    pub fn argmax(&self) -> Array2<u32> {
        Array2::from_shape_fn((self.n_codebooks(), self.frames()), |(n, t)| argmax(self.0[n].row(t).iter().copied()) as u32)
    }

    /// Fraction of cells where the argmax equals `target`.
    pub fn accuracy(&self, target: &TokenGrid) -> f64 {
        let pred = self.argmax();
        let hits = pred.iter().zip(target.tokens().iter()).filter(|(a, b)| a == b).count();
        hits as f64 / pred.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f64 {
        self.0.iter().zip(&other.0).flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Music-stream activations: the input layer followed by each block output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(pub Vec<Mat>);

/// Sampling controls for autoregressive decoding. `temperature <= 0` or
/// `top_k == Some(1)` means greedy decoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 0.0, top_k: None, seed: 0 }
    }
}

impl Sampling {
    pub fn greedy() -> Self {
        Self::default()
    }

    fn is_greedy(&self) -> bool {
        self.temperature <= 0.0 || self.top_k == Some(1)
    }

    fn pick(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
        if self.is_greedy() {
            return argmax(logits.iter().copied());
        }
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(self.top_k.unwrap_or(logits.len()).max(1));
        let max = logits[order[0]];
        let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / self.temperature).exp()).collect();
        let dist = WeightedIndex::new(&weights).expect("softmax weights are positive");
        order[dist.sample(rng)]
    }
}

/// Runs `length` decoding steps. `step` receives the `N×t` prefix and returns
/// the last-position logits of every codebook.
pub fn decode_autoregressive(
    n_codebooks: usize,
    length: usize,
    sampling: &Sampling,
    mut step: impl FnMut(ArrayView2<u32>) -> Result<Vec<Vec<f64>>>,
) -> Result<Array2<u32>> {
    if length == 0 {
        return Err(Error::input("generation length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut tokens = Array2::<u32>::zeros((n_codebooks, length));
    for t in 0..length {
        let last = step(tokens.slice(s![.., ..t]))?;
        for (n, row) in last.iter().enumerate() {
            tokens[[n, t]] = sampling.pick(row, &mut rng) as u32;
        }
    }
    Ok(tokens)
}

/// Sinusoidal position table, `rows×d`.
pub fn sinusoidal_positions(rows: usize, d: usize) -> Mat {
    Mat::from_shape_fn((rows, d), |(t, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Extension points inside each decoder layer, used by the adapters.
pub(crate) trait LayerHooks {
    /// Replaces the self-attention sublayer output `o` (before the residual add).
    fn self_attention(&mut self, _g: &mut Graph<'_>, _layer: usize, _q: Var, o: Var, _w_o: Var) -> Var {
        o
    }

    /// Returns the query and value projections used by text cross-attention.
    fn cross_projections(&mut self, _g: &mut Graph<'_>, _layer: usize, w_q: Var, w_v: Var) -> (Var, Var) {
        (w_q, w_v)
    }
}

pub(crate) struct NoHooks;

impl LayerHooks for NoHooks {}

pub(crate) fn layer_norm(g: &mut Graph<'_>, x: Var, p: &LayerNormParams<Var>) -> Var {
    g.layer_norm(x, p.gamma, p.beta)
}

pub(crate) fn feed_forward(g: &mut Graph<'_>, x: Var, p: &FeedForward<Var>) -> Var {
    let h = g.matmul(x, p.w_in);
    let h = g.add_row(h, p.b_in);
    let h = g.gelu(h);
    let h = g.matmul(h, p.w_out);
    g.add_row(h, p.b_out)
}

/// Text encoder output for token ids.
pub(crate) fn text_graph(g: &mut Graph<'_>, heads: usize, w: &TextEncoderParams<Var>, ids: &[usize]) -> Var {
    let tok = g.gather(w.token_embedding, ids);
    let pos = g.rows(w.position_embedding, 0, ids.len());
    let mut h = g.add(tok, pos);
    for b in &w.blocks {
        let a = layer_norm(g, h, &b.ln_attn);
        let q = g.matmul(a, b.attn.w_q);
        let k = g.matmul(a, b.attn.w_k);
        let v = g.matmul(a, b.attn.w_v);
        let att = g.attention(q, k, v, heads, AttentionMask::NONE);
        let o = g.matmul(att, b.attn.w_o);
        h = g.add(h, o);
        let f = layer_norm(g, h, &b.ln_ffn);
        let f = feed_forward(g, f, &b.ffn);
        h = g.add(h, f);
    }
    layer_norm(g, h, &w.ln_final)
}

/// Summed codebook embeddings of every frame, `T×d`.
pub(crate) fn embed_graph(g: &mut Graph<'_>, w: &BaseWeights<Var>, tokens: ArrayView2<u32>) -> Var {
    let mut acc: Option<Var> = None;
    for (n, row) in tokens.rows().into_iter().enumerate() {
        let idx: Vec<usize> = row.iter().map(|&t| t as usize).collect();
        let e = g.gather(w.embeddings[n], &idx);
        acc = Some(match acc {
            Some(a) => g.add(a, e),
            None => e,
        });
    }
    acc.expect("at least one codebook")
}

/// Decoder input for a prefix of `p` frames: `p + 1` rows (start row plus
/// shifted embeddings), before positions are added.
pub(crate) fn shifted_input_graph(g: &mut Graph<'_>, w: &BaseWeights<Var>, prefix: ArrayView2<u32>) -> Var {
    if prefix.ncols() == 0 {
        return w.sos;
    }
    let e = embed_graph(g, w, prefix);
    g.concat_rows(w.sos, e)
}

pub(crate) struct DecoderOutput {
    pub logits: Vec<Var>,
    pub hidden: Vec<Var>,
}

/// Text cross-attention: queries from the music stream `c`, keys and values
/// from the instruction.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cross_attention_graph(
    g: &mut Graph<'_>,
    heads: usize,
    c: Var,
    text: Var,
    mask: AttentionMask<'_>,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
) -> Var {
    let q = g.matmul(c, w_q);
    let k = g.matmul(text, w_k);
    let v = g.matmul(text, w_v);
    let att = g.attention(q, k, v, heads, mask);
    g.matmul(att, w_o)
}

/// Decoder stack over `input` (`T×d`, positions added here).
pub(crate) fn decoder_graph(
    g: &mut Graph<'_>,
    cfg: &LmConfig,
    w: &BaseWeights<Var>,
    input: Var,
    text: Var,
    text_mask: &[bool],
    hooks: &mut dyn LayerHooks,
) -> DecoderOutput {
    let t = g.value(input).nrows();
    let pos = g.constant(sinusoidal_positions(t, cfg.d_model));
    let mut h = g.add(input, pos);
    let mut hidden = vec![h];
    let text_attn_mask = AttentionMask { causal: false, keys: Some(text_mask) };
    for (m, b) in w.blocks.iter().enumerate() {
        let a = layer_norm(g, h, &b.ln_self);
        let q = g.matmul(a, b.self_attn.w_q);
        let k = g.matmul(a, b.self_attn.w_k);
        let v = g.matmul(a, b.self_attn.w_v);
        let att = g.attention(q, k, v, cfg.n_heads, AttentionMask::CAUSAL);
        let o = g.matmul(att, b.self_attn.w_o);
        let o = hooks.self_attention(g, m, q, o, b.self_attn.w_o);
        h = g.add(h, o);

        let c = layer_norm(g, h, &b.ln_cross);
        let (w_q, w_v) = hooks.cross_projections(g, m, b.cross_attn.w_q, b.cross_attn.w_v);
        let oc = cross_attention_graph(g, cfg.n_heads, c, text, text_attn_mask, w_q, b.cross_attn.w_k, w_v, b.cross_attn.w_o);
        h = g.add(h, oc);

        let f = layer_norm(g, h, &b.ln_ffn);
        let f = feed_forward(g, f, &b.ffn);
        h = g.add(h, f);
        hidden.push(h);
    }
    let hf = layer_norm(g, h, &w.ln_final);
    let logits = w.heads.iter().map(|&head| g.matmul(hf, head)).collect();
    DecoderOutput { logits, hidden }
}

/// Binds weights into a graph; `trainable` controls gradient tracking.
pub(crate) fn bind<'a>(g: &mut Graph<'a>, w: &'a BaseWeights, trainable: bool) -> BaseWeights<Var> {
    w.map("", &mut |_, m| g.param(m, trainable))
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(dist))
}

fn ln_init(d: usize) -> LayerNormParams {
    LayerNormParams { gamma: Mat::ones((1, d)), beta: Mat::zeros((1, d)) }
}

fn attn_init(rng: &mut ChaCha8Rng, d: usize, out_std: f64) -> AttentionWeights {
    let std = 1.0 / (d as f64).sqrt();
    AttentionWeights {
        w_q: random(rng, d, d, std),
        w_k: random(rng, d, d, std),
        w_v: random(rng, d, d, std),
        w_o: random(rng, d, d, out_std),
    }
}

fn ffn_init(rng: &mut ChaCha8Rng, d: usize, f: usize, out_std: f64) -> FeedForward {
    FeedForward {
        w_in: random(rng, d, f, 1.0 / (d as f64).sqrt()),
        b_in: Mat::zeros((1, f)),
        w_out: random(rng, f, d, out_std),
        b_out: Mat::zeros((1, d)),
    }
}

/// The base model: weights, configuration and the frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub config: LmConfig,
    pub weights: BaseWeights,
    frozen: bool,
}

impl BaseModel {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f, l) = (config.d_model, config.ffn_dim, config.codebook_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_std = 1.0 / ((d * 2 * config.n_layers.max(config.text_layers).max(1)) as f64).sqrt();
        let embeddings = (0..config.n_codebooks).map(|_| random(&mut rng, l, d, 1.0)).collect();
        let sos = random(&mut rng, 1, d, 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| DecoderBlock {
                ln_self: ln_init(d),
                self_attn: attn_init(&mut rng, d, out_std),
                ln_cross: ln_init(d),
                cross_attn: attn_init(&mut rng, d, out_std),
                ln_ffn: ln_init(d),
                ffn: ffn_init(&mut rng, d, f, out_std),
            })
            .collect();
        let heads = (0..config.n_codebooks).map(|_| random(&mut rng, d, l, 1.0 / (d as f64).sqrt())).collect();
        let text = TextEncoderParams {
            token_embedding: random(&mut rng, VOCABULARY.len(), d, 1.0),
            position_embedding: random(&mut rng, config.text_max_len, d, 0.1),
            blocks: (0..config.text_layers)
                .map(|_| TextBlock {
                    ln_attn: ln_init(d),
                    attn: attn_init(&mut rng, d, out_std),
                    ln_ffn: ln_init(d),
                    ffn: ffn_init(&mut rng, d, f, out_std),
                })
                .collect(),
            ln_final: ln_init(d),
        };
        let weights =
            BaseWeights { embeddings, sos, blocks, ln_final: ln_init(d), heads, text };
        Ok(Self { config: config.clone(), weights, frozen: false })
    }

    /// Wraps loaded weights after checking every shape against `config`.
    pub fn from_weights(config: LmConfig, weights: BaseWeights, frozen: bool) -> Result<Self> {
        let reference = Self::init(&config, 0)?;
        let mut expected = Vec::new();
        reference.weights.visit("", &mut |n, m| expected.push((n.to_string(), m.dim())));
        let mut found = Vec::new();
        weights.visit("", &mut |n, m| found.push((n.to_string(), m.dim())));
        if expected != found {
            return Err(Error::config("base weights do not match the model configuration"));
        }
        let mut finite = true;
        weights.visit("", &mut |_, m| finite &= m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("base weights".into()));
        }
        Ok(Self { config, weights, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit("", &mut |_, m| n += m.len());
        n
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        let ids = tokenize(text, self.config.text_max_len)?;
        let mut g = Graph::new();
        let w = self.weights.text.map("", &mut |_, m| g.param(m, false));
        let out = text_graph(&mut g, self.config.n_heads, &w, &ids);
        TextEmbedding::new(g.value(out).clone(), vec![true; ids.len()])
    }

    pub(crate) fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.n_codebooks() != self.config.n_codebooks {
            return Err(Error::input(format!(
                "grid has {} codebooks, model expects {}",
                grid.n_codebooks(),
                self.config.n_codebooks
            )));
        }
        if grid.codebook_size() != self.config.codebook_size {
            return Err(Error::input(format!(
                "grid codebook size {} does not match model vocabulary {}",
                grid.codebook_size(),
                self.config.codebook_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_text(&self, text: &TextEmbedding) -> Result<()> {
        if text.values.ncols() != self.config.d_model {
            return Err(Error::input("text embedding width does not match the model"));
        }
        TextEmbedding::new(text.values.clone(), text.mask.clone()).map(|_| ())
    }

    /// Sum of the `N` codebook embedding lookups per frame.
    pub fn embed_tokens(&self, grid: &TokenGrid) -> Result<Mat> {
        self.check_grid(grid)?;
        let mut g = Graph::new();
        let w = bind(&mut g, &self.weights, false);
        let e = embed_graph(&mut g, &w, grid.tokens().view());
        Ok(g.value(e).clone())
    }

    /// Teacher-forcing input for `target`: start row then frames `0..T-1`.
    pub fn shifted_embeddings(&self, target: &TokenGrid) -> Result<Mat> {
        self.check_grid(target)?;
        let mut g = Graph::new();
        let w = bind(&mut g, &self.weights, false);
        let prefix = target.tokens().slice(s![.., ..target.frames() - 1]);
        let x = shifted_input_graph(&mut g, &w, prefix);
        Ok(g.value(x).clone())
    }

    /// Decoder pass over `music_embeddings` (`T×d`, without positions).
    pub fn forward(&self, music_embeddings: &Mat, text: &TextEmbedding) -> Result<(Logits, HiddenStates)> {
        if music_embeddings.nrows() == 0 || music_embeddings.ncols() != self.config.d_model {
            return Err(Error::input(format!(
                "music embeddings must be T×{} with T >= 1, got {:?}",
                self.config.d_model,
                music_embeddings.dim()
            )));
        }
        self.check_text(text)?;
        let mut g = Graph::new();
        let w = bind(&mut g, &self.weights, false);
        let x = g.constant(music_embeddings.clone());
        let tv = g.constant(text.values.clone());
        let out = decoder_graph(&mut g, &self.config, &w, x, tv, &text.mask, &mut NoHooks);
        let logits = Logits(out.logits.iter().map(|&v| g.value(v).clone()).collect());
        let hidden = HiddenStates(out.hidden.iter().map(|&v| g.value(v).clone()).collect());
        Ok((logits, hidden))
    }

    /// Teacher-forced logits for `target`.
    pub fn teacher_forced_logits(&self, target: &TokenGrid, text: &TextEmbedding) -> Result<Logits> {
        Ok(self.forward(&self.shifted_embeddings(target)?, text)?.0)
    }

    /// Unconditional-audio generation from text alone.
    pub fn generate(&self, text: &TextEmbedding, length: usize, sampling: &Sampling, frame_rate: u32) -> Result<TokenGrid> {
        self.check_text(text)?;
        let tokens = decode_autoregressive(self.config.n_codebooks, length, sampling, |prefix| {
            let mut g = Graph::new();
            let w = bind(&mut g, &self.weights, false);
            let x = shifted_input_graph(&mut g, &w, prefix);
            let tv = g.constant(text.values.clone());
            let out = decoder_graph(&mut g, &self.config, &w, x, tv, &text.mask, &mut NoHooks);
            Ok(last_rows(&g, &out.logits))
        })?;
        TokenGrid::new(tokens, self.config.codebook_size, frame_rate)
    }
}

pub(crate) fn last_rows(g: &Graph<'_>, logits: &[Var]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|&v| {
            let m = g.value(v);
            m.row(m.nrows() - 1).to_vec()
        })
        .collect()
}

/// Mean cross-entropy over all `N·T` cells.
pub(crate) fn grid_cross_entropy(g: &mut Graph<'_>, logits: &[Var], target: &TokenGrid) -> Var {
    let n = logits.len() as f64;
    let mut total: Option<Var> = None;
    for (c, &l) in logits.iter().enumerate() {
        let ce = g.cross_entropy(l, &target.codebook_row(c));
        total = Some(match total {
            Some(t) => g.add(t, ce),
            None => ce,
        });
    }
    g.scale(total.expect("at least one codebook"), 1.0 / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            learning_rate: 3e-3,
            warmup_steps: 50,
            batch_size: 16,
            grad_clip: 1.0,
            optimizer: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
        }
    }
}

/// Per-step record of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for PretrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} loss {:.4} lr {:.2e}", self.step, self.loss, self.lr)
    }
}

/// Next-token training of every base weight on (description, grid) pairs.
/// Returns the trained, unfrozen model and one log entry per step.
pub fn pretrain_base(
    mut model: BaseModel,
    corpus: &[(String, TokenGrid)],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(BaseModel, Vec<PretrainLog>)> {
    if corpus.is_empty() {
        return Err(Error::input("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let examples: Vec<(Vec<usize>, &TokenGrid)> = corpus
        .iter()
        .map(|(text, grid)| {
            model.check_grid(grid)?;
            Ok((tokenize(text, model.config.text_max_len)?, grid))
        })
        .collect::<Result<_>>()?;
    model.frozen = false;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::zeros(flatten(&model.weights));
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..examples.len())).collect();
        let results: Vec<(f64, Vec<Mat>)> = batch
            .par_iter()
            .map(|&i| {
                let (ids, grid) = &examples[i];
                pretrain_example(&model, ids, grid)
            })
            .collect();
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let mut grads = optim::mean_grads(results.into_iter().map(|r| r.1).collect());
        optim::clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = optim::lr_at(step - 1, cfg.learning_rate, cfg.warmup_steps, cfg.steps);
        state.begin_step();
        let mut i = 0;
        model.weights.visit_mut("", &mut |_, p| {
            state.apply(i, p, &grads[i], true, lr, &cfg.optimizer);
            i += 1;
        });
        log::debug!("pretrain step {step} loss {loss:.4}");
        log.push(PretrainLog { step, loss, lr });
    }
    Ok((model, log))
}

fn pretrain_example(model: &BaseModel, ids: &[usize], grid: &TokenGrid) -> (f64, Vec<Mat>) {
    let mut g = Graph::new();
    let w = bind(&mut g, &model.weights, true);
    let text = text_graph(&mut g, model.config.n_heads, &w.text, ids);
    let mask = vec![true; ids.len()];
    let x = shifted_input_graph(&mut g, &w, grid.tokens().slice(s![.., ..grid.frames() - 1]));
    let out = decoder_graph(&mut g, &model.config, &w, x, text, &mask, &mut NoHooks);
    let loss = grid_cross_entropy(&mut g, &out.logits, grid);
    let mut grads = g.backward(loss);
    let mut flat = Vec::new();
    w.visit("", &mut |_, &v| flat.push(v));
    let values = flatten(&model.weights);
    let grads = flat.iter().zip(values).map(|(&v, m)| grads.take(v).unwrap_or_else(|| Mat::zeros(m.dim()))).collect();
    (g.scalar(loss), grads)
}

pub(crate) fn flatten(w: &BaseWeights) -> Vec<&Mat> {
    let mut out = Vec::new();
    w.visit("", &mut |_, m| out.push(m));
    out
}

/// Mean teacher-forced accuracy of the base model over (text, grid) pairs.
pub fn teacher_forced_accuracy(model: &BaseModel, corpus: &[(String, TokenGrid)]) -> Result<f64> {
    let accs: Vec<f64> = corpus
        .par_iter()
        .map(|(text, grid)| Ok(model.teacher_forced_logits(grid, &model.encode_text(text)?)?.accuracy(grid)))
        .collect::<Result<_>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Row sums of every attention matrix produced by a base forward pass.
#[doc(hidden)]
pub fn attention_row_sums(model: &BaseModel, music_embeddings: &Mat, text: &TextEmbedding) -> Vec<f64> {
    let mut g = Graph::new();
    let w = bind(&mut g, &model.weights, false);
    let x = g.constant(music_embeddings.clone());
    let tv = g.constant(text.values.clone());
    decoder_graph(&mut g, &model.config, &w, x, tv, &text.mask, &mut NoHooks);
    g.all_attention_weights().flat_map(|p| p.sum_axis(Axis(1)).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> LmConfig {
        LmConfig {
            n_codebooks: 2,
            codebook_size: 8,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            text_layers: 1,
            text_max_len: 8,
        }
    }

    fn grid(tokens: Vec<u32>, n: usize, l: usize) -> TokenGrid {
        let t = tokens.len() / n;
        TokenGrid::new(Array2::from_shape_vec((n, t), tokens).unwrap(), l, 50).unwrap()
    }

    #[test]
    fn tokenizer_normalizes() {
        assert_eq!(tokenize("Extract drum.", 8).unwrap(), tokenize("extract DRUMS", 8).unwrap());
        assert_eq!(tokenize("Add guitar", 8).unwrap().len(), 2);
        assert_eq!(tokenize("zither", 8).unwrap(), vec![UNK]);
        assert!(tokenize("", 8).is_err());
        assert!(tokenize(" ... ", 8).is_err());
        assert_eq!(tokenize("a a a a a a a a a a", 4).unwrap().len(), 4);
    }

    #[test]
    fn text_embeddings_are_deterministic_and_distinct() {
        let m = BaseModel::init(&tiny(), 3).unwrap();
        let a = m.encode_text("Add guitar").unwrap();
        assert_eq!(a.values.dim(), (2, 8));
        assert_eq!(a, m.encode_text("Add guitar").unwrap());
        let add = m.encode_text("add drums").unwrap();
        let remove = m.encode_text("remove drums").unwrap();
        assert!(add.values.iter().zip(remove.values.iter()).any(|(x, y)| x != y));
        assert!(m.encode_text("").is_err());
    }

    #[test]
    fn embedding_lookup_properties() {
        let m = BaseModel::init(&tiny(), 1).unwrap();
        let zeros = m.embed_tokens(&grid(vec![0; 6], 2, 8)).unwrap();
        let expect = &m.weights.embeddings[0].row(0) + &m.weights.embeddings[1].row(0);
        for row in zeros.rows() {
            assert_eq!(row, expect);
        }
        let a = m.embed_tokens(&grid(vec![1, 2, 3, 4, 5, 6], 2, 8)).unwrap();
        let b = m.embed_tokens(&grid(vec![1, 7, 3, 4, 5, 6], 2, 8)).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        assert!(m.embed_tokens(&grid(vec![0; 9], 3, 8)).is_err());
    }

    #[test]
    fn forward_shapes_and_causality() {
        let m = BaseModel::init(&tiny(), 2).unwrap();
        let text = m.encode_text("bass and piano").unwrap();
        let x1 = Mat::from_elem((1, 8), 0.3);
        let (l1, h1) = m.forward(&x1, &text).unwrap();
        assert_eq!((l1.n_codebooks(), l1.frames(), l1.codebook(0).ncols()), (2, 1, 8));
        assert_eq!(h1.0.len(), 3);

        let x = Mat::from_shape_fn((6, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let (base, _) = m.forward(&x, &text).unwrap();
        for t in 0..6 {
            let mut y = x.clone();
            y.row_mut(t).mapv_inplace(|v| v + 1.5);
            let (pert, _) = m.forward(&y, &text).unwrap();
            for c in 0..2 {
                assert_eq!(pert.codebook(c).slice(s![..t, ..]), base.codebook(c).slice(s![..t, ..]));
                assert_ne!(pert.codebook(c).row(t), base.codebook(c).row(t));
            }
        }
        for s in attention_row_sums(&m, &x, &text) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(m.forward(&Mat::zeros((3, 5)), &text).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [tiny(), LmConfig::default()] {
            let m = BaseModel::init(&cfg, 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.base_parameter_count());
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = BaseModel::init(&tiny(), 4).unwrap();
        let text = m.encode_text("drums").unwrap();
        let a = m.generate(&text, 5, &Sampling::greedy(), 50).unwrap();
        let b = m.generate(&text, 5, &Sampling::greedy(), 50).unwrap();
        assert_eq!(a, b);
        let k1 = Sampling { temperature: 1.0, top_k: Some(1), seed: 9 };
        assert_eq!(m.generate(&text, 5, &k1, 50).unwrap(), a);
        assert!(m.generate(&text, 0, &Sampling::greedy(), 50).is_err());
    }

    #[test]
    fn first_step_samples_follow_softmax() {
        let m = BaseModel::init(&tiny(), 5).unwrap();
        let text = m.encode_text("guitar").unwrap();
        let (logits, _) = m.forward(&m.weights.sos, &text).unwrap();
        let probs = crate::autograd::softmax_rows(logits.codebook(0));
        let draws = 1000;
        let mut counts = [0usize; 8];
        for seed in 0..draws {
            let s = Sampling { temperature: 1.0, top_k: None, seed };
            let g = m.generate(&text, 1, &s, 50).unwrap();
            counts[g.get(0, 0)] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = probs[[0, k]];
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma + 1e-9, "token {k}: {c} vs p={p}");
        }
    }

    #[test]
    fn pretraining_zero_steps_is_identity_and_one_step_is_finite() {
        let m = BaseModel::init(&tiny(), 6).unwrap();
        let corpus = vec![("bass".to_string(), grid(vec![1, 2, 3, 4, 5, 6, 7, 0], 2, 8))];
        let cfg = PretrainConfig { steps: 0, batch_size: 2, ..PretrainConfig::default() };
        let (same, log) = pretrain_base(m.clone(), &corpus, &cfg, 0).unwrap();
        assert_eq!(same, m);
        assert!(log.is_empty());
        let cfg = PretrainConfig { steps: 1, warmup_steps: 0, ..cfg };
        let (trained, log) = pretrain_base(m.clone(), &corpus, &cfg, 0).unwrap();
        assert_eq!(log.len(), 1);
        assert!(log[0].loss.is_finite());
        assert_ne!(trained, m);
        assert!(!trained.is_frozen());
    }

    #[test]
    fn pretraining_overfits_four_clips() {
        let cfg = LmConfig { codebook_size: 16, d_model: 16, ffn_dim: 32, ..tiny() };
        let m = BaseModel::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<(String, TokenGrid)> = ["bass", "drums", "piano", "guitar"]
            .iter()
            .map(|d| {
                let tokens: Vec<u32> = (0..2 * 10).map(|_| rng.gen_range(0..16)).collect();
                (d.to_string(), grid(tokens, 2, 16))
            })
            .collect();
        let before = teacher_forced_accuracy(&m, &corpus).unwrap();
        let pcfg = PretrainConfig { steps: 2000, batch_size: 4, warmup_steps: 50, ..PretrainConfig::default() };
        let (trained, log) = pretrain_base(m, &corpus, &pcfg, 1).unwrap();
        let after = teacher_forced_accuracy(&trained, &corpus).unwrap();
        assert!(after > 0.9, "accuracy {before} -> {after}, final loss {}", log.last().unwrap().loss);
    }
}
