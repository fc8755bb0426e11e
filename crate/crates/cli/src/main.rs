use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stemedit::audio::{read_wav_at, write_wav, WavEncoding};
use stemedit::config::RunConfig;
use stemedit::lm::Sampling;
use stemedit::metrics::Editor;
use stemedit::pipeline::{self, ModelEditor};
use stemedit::trainer::{grad_check, GradCheckConfig, LossMode};
use stemedit::Error;

/// Instruction-driven stem editing over codec tokens.
#[derive(Parser, Debug)]
#[command(name = "stemedit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.work_dir`.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multitrack corpus.
    GenCorpus {
        #[arg(long)]
        tracks: Option<usize>,
    },
    /// Build training and evaluation edit manifests from the corpus.
    MakeTriplets {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit the codec and pretrain the base model.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the fusion and text adapters against the frozen base.
    Finetune {
        #[arg(long)]
        steps: Option<u64>,
        /// Train audio fusion only; the text-side adapters stay inactive.
        #[arg(long)]
        no_text_fusion: bool,
        /// Rank of the factorized condition projections.
        #[arg(long)]
        bottleneck: Option<usize>,
        #[arg(long)]
        loss: Option<String>,
    },
    /// Edit one audio file.
    Edit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        out: PathBuf,
        /// Base checkpoint (default: the work directory's).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Sampling temperature; 0 decodes greedily.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Evaluate the trained model on the evaluation manifest.
    Eval,
    /// Compare analytic and finite-difference adapter gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        dmodel: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Check at initialization (zero gates and zero LoRA B).
        #[arg(long)]
        at_init: bool,
        #[arg(long)]
        bottleneck: Option<usize>,
    },
}

fn resolve(common: &Common) -> stemedit::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(dir) = &common.work_dir {
        cfg.paths.work_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> stemedit::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenCorpus { tracks } => {
            if let Some(n) = tracks {
                cfg.data.n_tracks = n;
            }
            finish_config(&cfg, cli.common.show_config)?;
            let path = pipeline::gen_corpus(&cfg)?;
            log::info!("wrote {}", path.display());
        }
        Command::MakeTriplets { count } => {
            if let Some(n) = count {
                cfg.data.n_train_triplets = n;
            }
            finish_config(&cfg, cli.common.show_config)?;
            let (train, eval) = pipeline::make_triplets(&cfg)?;
            log::info!("wrote {} and {}", train.display(), eval.display());
        }
        Command::Pretrain { steps } => {
            if let Some(n) = steps {
                cfg.pretrain.steps = n;
            }
            finish_config(&cfg, cli.common.show_config)?;
            let (_, _, summary) = pipeline::pretrain(&cfg)?;
            log::info!("pretraining done: loss {:.4}, accuracy {:.3}", summary.final_loss, summary.train_accuracy);
        }
        Command::Finetune { steps, no_text_fusion, bottleneck, loss } => {
            if let Some(n) = steps {
                cfg.trainer.total_steps = n;
            }
            if no_text_fusion {
                cfg.trainer.text_fusion_enabled = false;
            }
            if bottleneck.is_some() {
                cfg.fusion.bottleneck = bottleneck;
            }
            if let Some(l) = loss {
                cfg.trainer.loss_mode = l.parse::<LossMode>()?;
            }
            finish_config(&cfg, cli.common.show_config)?;
            let (_, summary, _) = pipeline::finetune(&cfg)?;
            log::info!(
                "finetuning done: validation accuracy {:.3} (gate-zero {:.3}), loss {:.4}",
                summary.validation.accuracy,
                summary.baseline.accuracy,
                summary.validation.loss
            );
        }
        Command::Edit { input, instruction, out, base, adapters, temperature, top_k } => {
            finish_config(&cfg, cli.common.show_config)?;
            let sampling = Sampling {
                temperature: temperature.unwrap_or(cfg.sampling.temperature),
                top_k: top_k.or(cfg.sampling.top_k),
                ..cfg.sampling
            };
            let editor = ModelEditor::load(
                &base.unwrap_or_else(|| cfg.paths.base_checkpoint()),
                &adapters.unwrap_or_else(|| cfg.paths.adapter_checkpoint()),
                sampling,
            )?;
            let audio = read_wav_at(&input, editor.codec.config().sample_rate)?;
            let edited = editor.edit("cli", &audio, &instruction)?;
            write_wav(&out, &edited, WavEncoding::Float32)?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval => {
            finish_config(&cfg, cli.common.show_config)?;
            let report = pipeline::eval(&cfg)?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck { layers, dmodel, heads, frames, step, at_init, bottleneck } => {
            let mut gc = GradCheckConfig { frames, step, perturb: !at_init, bottleneck, seed: cfg.seed, ..Default::default() };
            gc.model.n_layers = layers;
            gc.model.d_model = dmodel;
            gc.model.n_heads = heads;
            gc.model.ffn_dim = 2 * dmodel;
            let report = grad_check(&gc)?;
            println!("{report}");
            if report.max_rel_error() >= 1e-4 {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error()
                )));
            }
        }
    }
    Ok(())
}

fn finish_config(cfg: &RunConfig, show: bool) -> stemedit::Result<()> {
    cfg.validate()?;
    if show {
        eprintln!("{}", cfg.to_toml());
    } else {
        log::debug!("resolved configuration:\n{}", cfg.to_toml());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
