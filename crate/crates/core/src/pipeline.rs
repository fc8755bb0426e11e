//! End-to-end stages over a work directory: corpus, triplets, base
//! pretraining, adapter finetuning, editing and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::{self, AdapterCheckpoint};
use crate::codec::CodebookStack;
use crate::config::RunConfig;
use crate::datagen::{self, derive_seed, ManifestRecord, Track, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::fusion::{generate_edit, Adapters};
use crate::lm::{self, BaseModel, PretrainLog, Sampling};
use crate::metrics::{self, CodecEmbedder, Editor, MetricsReport};
use crate::trainer::{self, LogRecord, TrainExample, TrainState, Validation};

const CODEC_STREAM: u64 = 1;
const BASE_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;
const ADAPTER_STREAM: u64 = 4;
const TRAIN_TRIPLET_STREAM: u64 = 5;
const EVAL_TRIPLET_STREAM: u64 = 6;
const CLIP_STREAM: u64 = 7;
const TRAINER_STREAM: u64 = 8;

pub fn gen_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    let corpus = datagen::gen_corpus(cfg.data.n_tracks, cfg.seed, &cfg.datagen)?;
    datagen::write_corpus(&cfg.paths.corpus_dir(), &corpus)
}

/// Training tracks and held-out tracks, in corpus order.
pub fn load_split(cfg: &RunConfig) -> Result<(Vec<Track>, Vec<Track>)> {
    let mut tracks = datagen::load_corpus(&cfg.paths.corpus_dir(), cfg.datagen.sample_rate)?;
    if tracks.len() <= cfg.data.n_eval_tracks {
        return Err(Error::input(format!(
            "corpus has {} tracks; {} are reserved for evaluation",
            tracks.len(),
            cfg.data.n_eval_tracks
        )));
    }
    let eval = tracks.split_off(tracks.len() - cfg.data.n_eval_tracks);
    Ok((tracks, eval))
}

/// Writes the training and evaluation manifests; returns their paths.
pub fn make_triplets(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (train, eval) = load_split(cfg)?;
    let a = datagen::build_manifest(
        &train,
        cfg.data.n_train_triplets,
        derive_seed(cfg.seed, TRAIN_TRIPLET_STREAM),
        &cfg.paths.train_dir(),
        &cfg.datagen,
    )?;
    let b = datagen::build_manifest(
        &eval,
        cfg.data.n_eval_triplets,
        derive_seed(cfg.seed, EVAL_TRIPLET_STREAM),
        &cfg.paths.eval_dir(),
        &cfg.datagen,
    )?;
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub codec_mse: Vec<f64>,
}

/// Fits the codec and pretrains the base model on captioned clips of the
/// training tracks, then writes the base checkpoint.
pub fn pretrain(cfg: &RunConfig) -> Result<(CodebookStack, BaseModel, PretrainSummary)> {
    let (train, _) = load_split(cfg)?;
    let codec_clips = datagen::description_clips(&train, cfg.data.n_codec_clips, derive_seed(cfg.seed, CLIP_STREAM), &cfg.datagen)?;
    let audio: Vec<Waveform> = codec_clips.into_iter().map(|(_, w)| w).collect();
    let codec = CodebookStack::fit(&audio, &cfg.codec, derive_seed(cfg.seed, CODEC_STREAM))?;
    let feats = codec.analyze(&audio[0])?;
    let codec_mse = (1..=cfg.codec.n_codebooks).map(|n| codec.quantization_mse(&feats, n)).collect();

    let clips = datagen::description_clips(&train, cfg.data.n_pretrain_clips, cfg.seed, &cfg.datagen)?;
    let corpus: Vec<(String, _)> =
        clips.par_iter().map(|(text, w)| Ok((text.clone(), codec.encode(w)?))).collect::<Result<_>>()?;
    let model = BaseModel::init(&cfg.model, derive_seed(cfg.seed, BASE_STREAM))?;
    let (model, log) = lm::pretrain_base(model, &corpus, &cfg.pretrain, derive_seed(cfg.seed, PRETRAIN_STREAM))?;
    write_log(&cfg.paths.work_dir.join("pretrain_log.jsonl"), &log)?;
    let summary = PretrainSummary {
        final_loss: log.last().map_or(f64::NAN, |l: &PretrainLog| l.loss),
        train_accuracy: lm::teacher_forced_accuracy(&model, &corpus)?,
        codec_mse,
    };
    checkpoint::save_base(&cfg.paths.base_checkpoint(), &codec, &model)?;
    Ok((codec, model, summary))
}

fn write_log<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the base checkpoint and freezes it.
pub fn load_frozen_base(path: &Path) -> Result<(CodebookStack, BaseModel)> {
    let (codec, mut base) = checkpoint::load_base(path)?;
    base.freeze();
    Ok((codec, base))
}

/// Tokenizes every record of the manifest in `dir`, in manifest order.
pub fn load_examples(dir: &Path, codec: &CodebookStack, base: &BaseModel) -> Result<Vec<TrainExample>> {
    let records = datagen::read_manifest(&dir.join(MANIFEST_FILE))?;
    records
        .par_iter()
        .map(|r| {
            let (cond, target) = datagen::load_record_audio(r, dir, codec.config().sample_rate)?;
            TrainExample::new(&r.instruction, &cond, &target, codec, base)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub trainable_parameters: usize,
    pub base_parameters: usize,
    pub validation: Validation,
    /// The same evaluation with freshly initialized (gate-zero) adapters.
    pub baseline: Validation,
}

pub fn fresh_adapters(cfg: &RunConfig) -> Result<Adapters> {
    Adapters::init(&cfg.model, &cfg.fusion, &cfg.lora, cfg.trainer.text_fusion_enabled, derive_seed(cfg.seed, ADAPTER_STREAM))
}

pub fn fresh_state(cfg: &RunConfig, adapters: &Adapters) -> TrainState {
    TrainState::new(adapters, derive_seed(cfg.seed ^ cfg.trainer.seed, TRAINER_STREAM))
}

fn run_metadata(cfg: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    let mut extra = BTreeMap::new();
    extra.insert("run_config".into(), serde_json::to_value(cfg).expect("config serializes"));
    extra
}

/// Trains adapters for `cfg.trainer.total_steps` steps against the frozen base
/// and writes the adapter checkpoint.
pub fn finetune(cfg: &RunConfig) -> Result<(Adapters, FinetuneSummary, Vec<LogRecord>)> {
    let (codec, base) = load_frozen_base(&cfg.paths.base_checkpoint())?;
    if codec.config() != &cfg.codec || base.config != cfg.model {
        return Err(Error::config("the base checkpoint was built with a different codec or model configuration"));
    }
    let train = load_examples(&cfg.paths.train_dir(), &codec, &base)?;
    let eval = load_examples(&cfg.paths.eval_dir(), &codec, &base)?;
    let mut adapters = fresh_adapters(cfg)?;
    let initial = adapters.clone();
    let mut state = fresh_state(cfg, &adapters);
    let hash = checkpoint::base_hash(&codec, &base);
    let ckpt_path = cfg.paths.adapter_checkpoint();
    let every = cfg.trainer.checkpoint_every;
    let log = trainer::finetune(&train, &base, &mut adapters, &mut state, &cfg.trainer, cfg.trainer.total_steps, |r, a, s| {
        if every > 0 && r.step % every == 0 {
            let c = AdapterCheckpoint { adapters: a.clone(), state: s.clone(), base_hash: hash.clone(), extra: run_metadata(cfg) };
            checkpoint::save_adapters(&ckpt_path, &c, &base.config)?;
        }
        if r.step % 50 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
        Ok(())
    })?;
    write_log(&cfg.paths.work_dir.join("finetune_log.jsonl"), &log)?;
    let c = AdapterCheckpoint { adapters: adapters.clone(), state, base_hash: hash, extra: run_metadata(cfg) };
    checkpoint::save_adapters(&ckpt_path, &c, &base.config)?;
    let names = trainer::trainable_names(&adapters);
    let mut trainable_parameters = 0;
    adapters.weights.visit("", &mut |n, m| {
        if names.iter().any(|t| t == n) {
            trainable_parameters += m.len();
        }
    });
    let summary = FinetuneSummary {
        steps: log.len() as u64,
        final_loss: log.last().map(|l| l.loss),
        trainable_parameters,
        base_parameters: base.parameter_count(),
        validation: trainer::validate(&eval, &base, &adapters, cfg.trainer.loss_mode)?,
        baseline: trainer::validate(&eval, &base, &initial, cfg.trainer.loss_mode)?,
    };
    let path = cfg.paths.work_dir.join("finetune_summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Error::io(&path, e))?;
    Ok((adapters, summary, log))
}

/// Frozen codec and base model with trained adapters.
pub struct ModelEditor {
    pub codec: CodebookStack,
    pub base: BaseModel,
    pub adapters: Adapters,
    pub sampling: Sampling,
}

impl ModelEditor {
    pub fn load(base_path: &Path, adapter_path: &Path, sampling: Sampling) -> Result<Self> {
        let (codec, base) = load_frozen_base(base_path)?;
        let ckpt = checkpoint::load_adapters(adapter_path, &codec, &base)?;
        Ok(Self { codec, base, adapters: ckpt.adapters, sampling })
    }
}

impl Editor for ModelEditor {
    /// Output has exactly the input's length.
    fn edit(&self, _id: &str, condition: &Waveform, instruction: &str) -> Result<Waveform> {
        if condition.sample_rate != self.codec.config().sample_rate {
            return Err(Error::input(format!(
                "audio is at {} Hz; the codec expects {} Hz",
                condition.sample_rate,
                self.codec.config().sample_rate
            )));
        }
        let grid = self.codec.encode(condition)?;
        let text = self.base.encode_text(instruction)?;
        let out = generate_edit(&grid, &text, &self.base, &self.adapters, &self.sampling)?;
        let mut samples = self.codec.decode(&out)?.samples;
        samples.resize(condition.len(), 0.0);
        Ok(Waveform { samples, sample_rate: condition.sample_rate })
    }
}

/// Evaluates the trained model on the evaluation manifest and writes
/// `report.json` and `report.txt`.
pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let editor = ModelEditor::load(&cfg.paths.base_checkpoint(), &cfg.paths.adapter_checkpoint(), cfg.sampling)?;
    let report = eval_with(cfg, &editor, &editor.codec)?;
    let dir = cfg.paths.report_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Evaluates any editor on the evaluation manifest, embedding with `codec`.
pub fn eval_with(cfg: &RunConfig, editor: &dyn Editor, codec: &CodebookStack) -> Result<MetricsReport> {
    let dir = cfg.paths.eval_dir();
    let records: Vec<ManifestRecord> = datagen::read_manifest(&dir.join(MANIFEST_FILE))?;
    Ok(metrics::evaluate(&dir, cfg.datagen.sample_rate, &records, editor, &CodecEmbedder(codec), &cfg.metrics))
}
