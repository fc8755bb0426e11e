//! Instruction finetuning of the adapters against a frozen base model, plus the
//! finite-difference gradient check.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Graph, Mat, Var};
use crate::codec::{CodebookStack, TokenGrid};
use crate::error::{Error, Result};
use crate::fusion::{fused_decoder_forward, fused_graph, AdapterWeights, Adapters, FusionConfig};
use crate::lm::{bind, grid_cross_entropy, shifted_input_graph, BaseModel, BaseWeights, LmConfig, Logits, TextEmbedding};
use crate::lora::LoraConfig;
use crate::optim::{self, AdamState, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean token negative log-likelihood.
    CrossEntropy,
    /// Squared distance between the probability-weighted codebook embedding
    /// and the target token's embedding.
    L2Embedding,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Self::CrossEntropy),
            "l2_embedding" => Ok(Self::L2Embedding),
            other => Err(Error::config(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CrossEntropy => "cross_entropy",
            Self::L2Embedding => "l2_embedding",
        })
    }
}

pub(crate) fn loss_graph(
    g: &mut Graph<'_>,
    mode: LossMode,
    logits: &[Var],
    target: &TokenGrid,
    base: &BaseWeights<Var>,
) -> Var {
    match mode {
        LossMode::CrossEntropy => grid_cross_entropy(g, logits, target),
        LossMode::L2Embedding => {
            let mut total: Option<Var> = None;
            for (n, &l) in logits.iter().enumerate() {
                let p = g.softmax(l);
                let pred = g.matmul(p, base.embeddings[n]);
                let tgt = g.gather(base.embeddings[n], &target.codebook_row(n));
                let diff = g.sub(pred, tgt);
                let ms = g.mean_square(diff);
                total = Some(match total {
                    Some(t) => g.add(t, ms),
                    None => ms,
                });
            }
            g.scale(total.expect("at least one codebook"), 1.0 / logits.len() as f64)
        }
    }
}

/// Loss of precomputed logits against `target`.
pub fn compute_loss(logits: &Logits, target: &TokenGrid, mode: LossMode, base: &BaseModel) -> Result<f64> {
    let (n, t, l) = (target.n_codebooks(), target.frames(), target.codebook_size());
    if logits.n_codebooks() != n || logits.0.iter().any(|m| m.dim() != (t, l)) {
        return Err(Error::input(format!("logits do not match a {n}×{t} grid over {l} tokens")));
    }
    if mode == LossMode::L2Embedding {
        base.check_grid(target)?;
    }
    let mut g = Graph::new();
    let w = bind(&mut g, &base.weights, false);
    let vars: Vec<Var> = logits.0.iter().map(|m| g.constant(m.clone())).collect();
    let loss = loss_graph(&mut g, mode, &vars, target, &w);
    Ok(g.scalar(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub loss_mode: LossMode,
    pub text_fusion_enabled: bool,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 8,
            grad_accumulation: 4,
            loss_mode: LossMode::CrossEntropy,
            text_fusion_enabled: true,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::config("batch_size and grad_accumulation must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One tokenized training or validation example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub instruction: String,
    pub text: TextEmbedding,
    pub condition: TokenGrid,
    pub target: TokenGrid,
}

impl TrainExample {
    pub fn new(
        instruction: &str,
        condition: &Waveform,
        target: &Waveform,
        codec: &CodebookStack,
        base: &BaseModel,
    ) -> Result<Self> {
        if condition.len() != target.len() {
            return Err(Error::input("condition and target lengths differ"));
        }
        Ok(Self {
            instruction: instruction.to_string(),
            text: base.encode_text(instruction)?,
            condition: codec.encode(condition)?,
            target: codec.encode(target)?,
        })
    }
}

/// Per-tensor flags derived from adapter names.
struct TensorRoles {
    names: Vec<String>,
    trainable: Vec<bool>,
    decay: Vec<bool>,
}

impl TensorRoles {
    fn new(adapters: &Adapters) -> Self {
        let mut names = Vec::new();
        adapters.weights.visit("", &mut |n, _| names.push(n.to_string()));
        let trainable = names.iter().map(|n| adapters.text_fusion || !n.starts_with("lora.")).collect();
        let decay = names.iter().map(|n| n.starts_with("fusion.linear_cond.") || n.starts_with("lora.")).collect();
        Self { names, trainable, decay }
    }
}

/// Names of the adapter tensors that receive updates under `adapters`' settings.
pub fn trainable_names(adapters: &Adapters) -> Vec<String> {
    let roles = TensorRoles::new(adapters);
    roles.names.into_iter().zip(roles.trainable).filter(|(_, t)| *t).map(|(n, _)| n).collect()
}

/// Loss and adapter gradients (in `visit` order) for one example. Tensors that
/// are not trainable, or do not influence the loss, get zero gradients.
pub fn example_gradients(
    example: &TrainExample,
    base: &BaseModel,
    adapters: &Adapters,
    mode: LossMode,
) -> Result<(f64, Vec<Mat>)> {
    let roles = TensorRoles::new(adapters);
    let (loss, grads) = loss_and_grads(example, base, adapters, mode, &roles.trainable, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn loss_and_grads(
    example: &TrainExample,
    base: &BaseModel,
    adapters: &Adapters,
    mode: LossMode,
    trainable: &[bool],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Mat>>)> {
    let (target, cond) = (&example.target, &example.condition);
    base.check_grid(target)?;
    base.check_grid(cond)?;
    if target.frames() != cond.frames() {
        return Err(Error::input("condition and target grids differ in length"));
    }
    if target.frames() > adapters.fusion_config.t_max {
        return Err(Error::config(format!("{} frames exceed t_max {}", target.frames(), adapters.fusion_config.t_max)));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, &base.weights, false);
    let mut i = 0;
    let a: AdapterWeights<Var> = adapters.weights.map("", &mut |_, m| {
        let v = g.param(m, want_grads && trainable[i]);
        i += 1;
        v
    });
    let x = shifted_input_graph(&mut g, &w, target.tokens().slice(s![.., ..target.frames() - 1]));
    let text = g.constant(example.text.values.clone());
    let lora_scale = adapters.text_fusion.then_some(adapters.lora_config.scale);
    let logits = fused_graph(&mut g, &base.config, &w, &a, lora_scale, cond.tokens().view(), x, text, &example.text.mask);
    let loss = loss_graph(&mut g, mode, &logits, target, &w);
    let value = g.scalar(loss);
    if !want_grads {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss);
    let mut out = Vec::with_capacity(trainable.len());
    a.visit("", &mut |_, &v| out.push(v));
    let mut shapes = Vec::with_capacity(out.len());
    adapters.weights.visit("", &mut |_, m| shapes.push(m.dim()));
    let grads = out.iter().zip(shapes).map(|(&v, dim)| grads.take(v).unwrap_or_else(|| Mat::zeros(dim))).collect();
    Ok((value, Some(grads)))
}

/// Mean loss and mean gradient over `batch`, computed as `accumulation`
/// micro-batches whose gradients are combined in proportion to their size.
pub fn batch_gradients(
    batch: &[&TrainExample],
    base: &BaseModel,
    adapters: &Adapters,
    mode: LossMode,
    accumulation: usize,
) -> Result<(f64, Vec<Mat>)> {
    if batch.is_empty() || accumulation == 0 {
        return Err(Error::input("empty batch"));
    }
    let roles = TensorRoles::new(adapters);
    let micro = batch.len().div_ceil(accumulation);
    let mut total_loss = 0.0;
    let mut total: Option<Vec<Mat>> = None;
    for chunk in batch.chunks(micro) {
        let results: Vec<(f64, Vec<Mat>)> = chunk
            .par_iter()
            .map(|ex| {
                loss_and_grads(ex, base, adapters, mode, &roles.trainable, true).map(|(l, g)| (l, g.expect("requested")))
            })
            .collect::<Result<_>>()?;
        let weight = chunk.len() as f64 / batch.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / chunk.len() as f64;
        let grads = optim::mean_grads(results.into_iter().map(|r| r.1).collect());
        total_loss += weight * loss;
        match &mut total {
            None => total = Some(grads.into_iter().map(|g| g * weight).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.scaled_add(weight, &g);
                }
            }
        }
    }
    Ok((total_loss, total.expect("nonempty batch")))
}

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Optimizer and sampling state of a finetuning run. Holds moments for
/// adapter tensors only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
    pub running_loss: Option<f64>,
}

impl TrainState {
    pub fn new(adapters: &Adapters, seed: u64) -> Self {
        let mut params = Vec::new();
        adapters.weights.visit("", &mut |_, m| params.push(m));
        Self { step: 0, optimizer: AdamState::zeros(params), rng: ChaCha8Rng::seed_from_u64(seed), running_loss: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step over `batch`; only trainable adapter tensors change.
pub fn finetune_step(
    batch: &[&TrainExample],
    base: &BaseModel,
    adapters: &mut Adapters,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if !base.is_frozen() {
        return Err(Error::config("the base model must be frozen before finetuning"));
    }
    cfg.validate()?;
    adapters.text_fusion = cfg.text_fusion_enabled;
    let (loss, mut grads) = batch_gradients(batch, base, adapters, cfg.loss_mode, cfg.grad_accumulation)?;
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        let roles = TensorRoles::new(adapters);
        let bad: Vec<&str> = roles
            .names
            .iter()
            .zip(&grads)
            .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
            .collect();
        return Err(Error::NonFinite(format!(
            "step {}: loss {loss}, non-finite gradients in [{}], instructions {:?}",
            state.step + 1,
            bad.join(", "),
            batch.iter().map(|e| e.instruction.as_str()).collect::<Vec<_>>()
        )));
    }
    let grad_norm = optim::clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = optim::lr_at(state.step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps);
    let roles = TensorRoles::new(adapters);
    state.optimizer.begin_step();
    let mut i = 0;
    adapters.weights.visit_mut("", &mut |_, p| {
        if roles.trainable[i] {
            state.optimizer.apply(i, p, &grads[i], roles.decay[i], lr, &cfg.optimizer);
        }
        i += 1;
    });
    state.step += 1;
    state.running_loss = Some(state.running_loss.map_or(loss, |r| 0.95 * r + 0.05 * loss));
    Ok(StepReport { step: state.step, loss, lr, grad_norm })
}

/// Training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Runs `steps` steps from `state`, drawing `batch_size · grad_accumulation`
/// examples per step with the state's generator. `on_step` sees every report
/// and may stop the run by returning an error.
pub fn finetune(
    examples: &[TrainExample],
    base: &BaseModel,
    adapters: &mut Adapters,
    state: &mut TrainState,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&StepReport, &Adapters, &TrainState) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    if examples.is_empty() {
        return Err(Error::input("no training examples"));
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch: Vec<&TrainExample> =
            (0..cfg.effective_batch()).map(|_| &examples[state.rng.gen_range(0..examples.len())]).collect();
        let report = finetune_step(&batch, base, adapters, state, cfg)?;
        log::debug!("step {} loss {:.4} lr {:.2e} |g| {:.3}", report.step, report.loss, report.lr, report.grad_norm);
        log.push(LogRecord {
            step: report.step,
            loss: report.loss,
            lr: report.lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        on_step(&report, adapters, state)?;
    }
    Ok(log)
}

/// Mean loss and teacher-forced token accuracy over `examples`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn validate(examples: &[TrainExample], base: &BaseModel, adapters: &Adapters, mode: LossMode) -> Result<Validation> {
    if examples.is_empty() {
        return Err(Error::input("no validation examples"));
    }
    let per: Vec<(f64, f64)> = examples
        .par_iter()
        .map(|ex| {
            let logits = fused_decoder_forward(&ex.target, &ex.condition, &ex.text, base, adapters)?;
            Ok((compute_loss(&logits, &ex.target, mode, base)?, logits.accuracy(&ex.target)))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(Validation { loss: per.iter().map(|p| p.0).sum::<f64>() / n, accuracy: per.iter().map(|p| p.1).sum::<f64>() / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: LmConfig,
    pub frames: usize,
    pub lora_rank: usize,
    pub bottleneck: Option<usize>,
    pub step: f64,
    pub loss_mode: LossMode,
    /// Move gates and LoRA `B` away from zero so every path carries gradient.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: LmConfig {
                n_codebooks: 2,
                codebook_size: 8,
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                ffn_dim: 16,
                text_layers: 1,
                text_max_len: 8,
            },
            frames: 4,
            lora_rank: 2,
            bottleneck: None,
            step: 1e-5,
            loss_mode: LossMode::CrossEntropy,
            perturb: true,
            seed: 0,
        }
    }
}

/// Relative errors below this magnitude floor are measured against the floor.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(6);
        writeln!(f, "{:<width$}  {:>6}  {:>12}  {:>12}", "tensor", "size", "max |grad|", "max rel err")?;
        for e in &self.entries {
            writeln!(f, "{:<width$}  {:>6}  {:>12.4e}  {:>12.4e}", e.name, e.len, e.max_abs_grad, e.max_rel_error)?;
        }
        write!(f, "overall max relative error {:.4e}", self.max_rel_error())
    }
}

/// Compares analytic adapter gradients with central differences on a random
/// tiny model. Every adapter tensor is reported; base tensors never are.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut base = BaseModel::init(&cfg.model, cfg.seed)?;
    base.freeze();
    let fusion_cfg = FusionConfig { t_max: cfg.frames, bottleneck: cfg.bottleneck, ..Default::default() };
    let lora_cfg = LoraConfig { rank: cfg.lora_rank, scale: 1.0 };
    let mut adapters = Adapters::init(&cfg.model, &fusion_cfg, &lora_cfg, true, cfg.seed ^ 0xad)?;
    if cfg.perturb {
        adapters.weights.visit_mut("", &mut |name, m| {
            if name.contains(".gates.") || name.ends_with(".b") {
                m.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            }
        });
    }
    let (n, l) = (cfg.model.n_codebooks, cfg.model.codebook_size);
    let random_grid = |rng: &mut ChaCha8Rng| {
        TokenGrid::new(Array2::from_shape_simple_fn((n, cfg.frames), || rng.gen_range(0..l as u32)), l, 50)
    };
    let example = TrainExample {
        instruction: "remove bass".into(),
        text: base.encode_text("remove bass")?,
        condition: random_grid(&mut rng)?,
        target: random_grid(&mut rng)?,
    };
    let roles = TensorRoles::new(&adapters);
    let (_, analytic) = loss_and_grads(&example, &base, &adapters, cfg.loss_mode, &roles.trainable, true)?;
    let analytic = analytic.expect("requested");

    let loss_at = |a: &Adapters| -> Result<f64> {
        Ok(loss_and_grads(&example, &base, a, cfg.loss_mode, &roles.trainable, false)?.0)
    };
    let mut entries = Vec::with_capacity(roles.names.len());
    for (t, name) in roles.names.iter().enumerate() {
        let len = analytic[t].len();
        let numeric: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|idx| {
                let mut plus = adapters.clone();
                let mut minus = adapters.clone();
                perturb_entry(&mut plus.weights, t, idx, cfg.step);
                perturb_entry(&mut minus.weights, t, idx, -cfg.step);
                Ok((loss_at(&plus)? - loss_at(&minus)?) / (2.0 * cfg.step))
            })
            .collect::<Result<_>>()?;
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (a, num) in analytic[t].iter().zip(&numeric) {
            max_abs = max_abs.max(a.abs());
            let denom = a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
            max_rel = max_rel.max((a - num).abs() / denom);
        }
        entries.push(GradCheckEntry { name: name.clone(), len, max_rel_error: max_rel, max_abs_grad: max_abs });
    }
    Ok(GradCheckReport { entries })
}

fn perturb_entry(w: &mut AdapterWeights, tensor: usize, idx: usize, delta: f64) {
    let mut i = 0;
    w.visit_mut("", &mut |_, m| {
        if i == tensor {
            let flat = m.as_slice_mut().expect("standard layout");
            flat[idx] += delta;
        }
        i += 1;
    });
}
