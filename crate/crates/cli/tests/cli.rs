use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stemedit::audio::{read_wav_at, write_wav, WavEncoding};
use stemedit::checkpoint::load_adapters;
use stemedit::config::RunConfig;
use stemedit::datagen::{gen_synthetic_track, mix, DatagenConfig};
use stemedit::pipeline::{fresh_adapters, load_frozen_base};

const MINI: &str = r#"
seed = 3

[data]
n_tracks = 8
n_eval_tracks = 2
n_train_triplets = 8
n_eval_triplets = 4
n_pretrain_clips = 8
n_codec_clips = 8

[datagen]
sample_rate = 8000
track_seconds = 3.0
clip_seconds = 1.0

[codec]
sample_rate = 8000
n_codebooks = 2
codebook_size = 16
feature_dim = 8

[model]
n_codebooks = 2
codebook_size = 16
n_layers = 1
d_model = 16
n_heads = 2
ffn_dim = 32
text_layers = 1
text_max_len = 8

[pretrain]
steps = 4
batch_size = 4

[fusion]
t_max = 50

[lora]
rank = 2

[trainer]
total_steps = 3
warmup_steps = 1
batch_size = 2
grad_accumulation = 1
"#;

fn stemedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stemedit")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Mini {
    _dir: tempfile::TempDir,
    config: PathBuf,
    work: PathBuf,
}

impl Mini {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("mini.toml");
        std::fs::write(&config, MINI).unwrap();
        let work = dir.path().join("work");
        Self { _dir: dir, config, work }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", self.config.to_str().unwrap(), "--work-dir", self.work.to_str().unwrap()];
        full.extend_from_slice(args);
        stemedit(&full)
    }

    fn run_ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn resolved(&self) -> RunConfig {
        let mut cfg = RunConfig::load(Some(&self.config)).unwrap();
        cfg.paths.work_dir = self.work.clone();
        cfg
    }

    fn prepared() -> Self {
        let m = Self::new();
        for c in ["gen-corpus", "make-triplets", "pretrain"] {
            m.run_ok(&[c]);
        }
        m
    }
}

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(code(&stemedit(&["--help"])), 0);
    for sub in ["gen-corpus", "make-triplets", "pretrain", "finetune", "edit", "eval", "gradcheck"] {
        let out = stemedit(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn bad_invocations_exit_one() {
    assert_eq!(code(&stemedit(&[])), 1);
    assert_eq!(code(&stemedit(&["transmogrify"])), 1);
    assert_eq!(code(&stemedit(&["finetune", "--steps", "many"])), 1);
    assert_eq!(code(&stemedit(&["edit", "--instruction", "Add drums"])), 1);
    let m = Mini::new();
    assert_eq!(code(&m.run(&["finetune", "--loss", "l1"])), 1);
    assert_eq!(code(&m.run(&["--config", "/nonexistent/run.toml", "eval"])), 1);
}

#[test]
fn gradcheck_passes() {
    let out = stemedit(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fusion.gates"));
}

#[test]
fn zero_step_finetune_saves_the_initialization() {
    let m = Mini::prepared();
    m.run_ok(&["finetune", "--steps", "0"]);
    let cfg = m.resolved();
    let (codec, base) = load_frozen_base(&cfg.paths.base_checkpoint()).unwrap();
    let saved = load_adapters(&cfg.paths.adapter_checkpoint(), &codec, &base).unwrap();
    assert_eq!(saved.adapters, fresh_adapters(&cfg).unwrap());
    assert_eq!(saved.state.step, 0);
}

fn write_input(path: &Path, seconds: f64) -> usize {
    let cfg = DatagenConfig { sample_rate: 8000, track_seconds: seconds, clip_seconds: 1.0, ..DatagenConfig::default() };
    let track = gen_synthetic_track(77, 3, seconds, &cfg).unwrap();
    let stems: Vec<_> = track.stems.iter().map(|s| &s.waveform).collect();
    let audio = mix(&stems).unwrap();
    write_wav(path, &audio, WavEncoding::Float32).unwrap();
    audio.len()
}

#[test]
fn edit_keeps_the_input_duration_and_flags_user_errors() {
    let m = Mini::prepared();
    m.run_ok(&["finetune"]);
    let input = m.work.join("input.wav");
    let output = m.work.join("edited.wav");
    let len = write_input(&input, 0.73);
    m.run_ok(&["edit", "--in", input.to_str().unwrap(), "--instruction", "Extract drum.", "--out", output.to_str().unwrap()]);
    let edited = read_wav_at(&output, 8000).unwrap();
    assert_eq!(edited.len(), len);

    let missing = m.work.join("missing.wav");
    let out = m.run(&["edit", "--in", missing.to_str().unwrap(), "--instruction", "Add bass", "--out", output.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    // Longer than the fusion position table.
    write_input(&input, 1.2);
    let out = m.run(&["edit", "--in", input.to_str().unwrap(), "--instruction", "Add bass", "--out", output.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_writes_reports() {
    let m = Mini::prepared();
    m.run_ok(&["finetune"]);
    let out = m.run_ok(&["eval"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("remove"));
    let report = m.resolved().paths.report_dir();
    assert!(report.join("report.json").is_file());
    assert!(report.join("report.txt").is_file());
}
