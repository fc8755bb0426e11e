//! Editing metrics and the per-task evaluation report.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::Mat;
use crate::codec::CodebookStack;
use crate::datagen::{load_record_audio, ManifestRecord, Task};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub stft_window: usize,
    pub stft_hop: usize,
    /// Side of the square SSIM window, in spectrogram cells.
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Reported in place of an infinite SI-SDR.
    pub si_sdr_cap: f64,
    pub variance_floor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            stft_window: 1024,
            stft_hop: 256,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            si_sdr_cap: 100.0,
            variance_floor: 1e-8,
        }
    }
}

fn check_lengths(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scale-invariant SDR in dB; `+∞` when the estimate is an exact multiple of
/// the reference.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(est, reference)?;
    let (e, r) = (&est.samples, &reference.samples);
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::input("SI-SDR reference is all zeros"));
    }
    let alpha = dot(e, r) / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (&x, &y) in e.iter().zip(r) {
        let t = alpha * y as f64;
        target += t * t;
        residual += (x as f64 - t).powi(2);
    }
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

/// SI-SDR gain of `est` over the unprocessed `condition`.
pub fn si_sdri(est: &Waveform, condition: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(condition, reference)?;
    let a = si_sdr(est, reference)?;
    let b = si_sdr(condition, reference)?;
    if a == b {
        return Ok(0.0);
    }
    Ok(a - b)
}

/// `ln(1 + |STFT|)` with a periodic Hann window; rows are frequency bins,
/// columns frames.
pub fn log_spectrogram(w: &Waveform, window: usize, hop: usize) -> Result<Mat> {
    if window == 0 || hop == 0 {
        return Err(Error::config("STFT window and hop must be positive"));
    }
    if w.len() < window {
        return Err(Error::input(format!("{} samples is shorter than one {window}-sample frame", w.len())));
    }
    let frames = 1 + (w.len() - window) / hop;
    let bins = window / 2 + 1;
    let hann: Vec<f64> =
        (0..window).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos()).collect();
    let fft = FftPlanner::new().plan_fft_forward(window);
    let mut out = Mat::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for f in 0..frames {
        let seg = &w.samples[f * hop..f * hop + window];
        for ((b, &x), &h) in buf.iter_mut().zip(seg).zip(&hann) {
            *b = Complex::new(x as f64 * h, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[k, f]] = buf[k].norm().ln_1p();
        }
    }
    Ok(out)
}

/// Mean windowed SSIM of two equally shaped images with values in `[0, 1]`.
pub fn ssim_images(a: &Mat, b: &Mat, cfg: &MetricsConfig) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::input("SSIM images must be nonempty and equally shaped"));
    }
    let c1 = (cfg.ssim_k1 * 1.0).powi(2);
    let c2 = (cfg.ssim_k2 * 1.0).powi(2);
    let (rows, cols) = a.dim();
    let (wh, ww) = (cfg.ssim_window.min(rows).max(1), cfg.ssim_window.min(cols).max(1));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=rows - wh {
        for j in 0..=cols - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..wh {
                for dj in 0..ww {
                    let (x, y) = (a[[i + di, j + dj]], b[[i + di, j + dj]]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM between log-magnitude spectrograms, both scaled by their joint maximum.
pub fn ssim(a: &Waveform, b: &Waveform, cfg: &MetricsConfig) -> Result<f64> {
    check_lengths(a, b)?;
    let mut sa = log_spectrogram(a, cfg.stft_window, cfg.stft_hop)?;
    let mut sb = log_spectrogram(b, cfg.stft_window, cfg.stft_hop)?;
    let peak = sa.iter().chain(sb.iter()).fold(0.0f64, |m, &x| m.max(x));
    if peak > 0.0 {
        sa.mapv_inplace(|x| x / peak);
        sb.mapv_inplace(|x| x / peak);
    }
    ssim_images(&sa, &sb, cfg)
}

/// Gaussian fit of an embedding set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSetStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl EmbeddingSetStats {
    /// Mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &Mat) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::input("at least two embeddings are needed for a covariance"));
        }
        let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let centered = features - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        let cov = (&cov + &cov.t()) * 0.5;
        Ok(Self { mean: mean.to_vec(), covariance: cov.iter().copied().collect(), count: n })
    }

    pub fn from_moments(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<Self> {
        if covariance.len() != mean.len() * mean.len() {
            return Err(Error::input("covariance must be dim × dim"));
        }
        Ok(Self { mean, covariance, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.covariance);
        (&m + m.transpose()) * 0.5
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn canonical_order(a: &EmbeddingSetStats, b: &EmbeddingSetStats) -> Ordering {
    let key = |s: &EmbeddingSetStats| s.mean.iter().chain(&s.covariance).map(|x| x.to_bits()).collect::<Vec<_>>();
    key(a).cmp(&key(b)).then(a.count.cmp(&b.count))
}

/// Fréchet distance between two Gaussian fits.
pub fn fad(a: &EmbeddingSetStats, b: &EmbeddingSetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!("embedding dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let (a, b) = if canonical_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (ca, cb) = (a.cov(), b.cov());
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>();
    Ok(mean_term + ca.trace() + cb.trace() - 2.0 * cross)
}

/// Mean over dimensions of `KL(N_a ‖ N_b)` between per-dimension Gaussian fits
/// of the rows of `a` and `b`.
pub fn kl_div(a: &Mat, b: &Mat, variance_floor: f64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::input(format!("feature dimensions differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::input("at least two feature rows are needed per side"));
    }
    let moments = |m: &Mat, j: usize| {
        let col = m.column(j);
        let mu = col.mean().expect("nonempty");
        let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        (mu, var.max(variance_floor))
    };
    let d = a.ncols();
    if d == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..d)
        .map(|j| {
            let (ma, va) = moments(a, j);
            let (mb, vb) = moments(b, j);
            let kl = 0.5 * (vb / va).ln() + (va + (ma - mb).powi(2)) / (2.0 * vb) - 0.5;
            kl.max(0.0)
        })
        .sum();
    Ok(total / d as f64)
}

/// Maps audio to a set of embedding vectors (one per row).
pub trait Embedder: Sync {
    fn name(&self) -> String;
    fn embed(&self, audio: &Waveform) -> Result<Mat>;
}

/// Codec frame features as embeddings.
pub struct CodecEmbedder<'a>(pub &'a CodebookStack);

impl Embedder for CodecEmbedder<'_> {
    fn name(&self) -> String {
        format!("codec frame features ({} dims)", self.0.config().feature_dim)
    }

    fn embed(&self, audio: &Waveform) -> Result<Mat> {
        self.0.analyze(audio)
    }
}

/// Text-audio similarity needs a pretrained contrastive model, which is not
/// part of this crate.
pub fn clap_score(_audio: &Waveform, _text: &str) -> Option<f64> {
    None
}

/// Something that performs an instructed edit.
pub trait Editor: Sync {
    fn edit(&self, id: &str, condition: &Waveform, instruction: &str) -> Result<Waveform>;
}

/// Returns the condition unchanged.
pub struct CopyEditor;

impl Editor for CopyEditor {
    fn edit(&self, _id: &str, condition: &Waveform, _instruction: &str) -> Result<Waveform> {
        Ok(condition.clone())
    }
}

/// Returns known answers by record id.
pub struct OracleEditor(pub BTreeMap<String, Waveform>);

impl Editor for OracleEditor {
    fn edit(&self, id: &str, _condition: &Waveform, _instruction: &str) -> Result<Waveform> {
        self.0.get(id).cloned().ok_or_else(|| Error::input(format!("no oracle output for {id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub count: usize,
    pub fad: Option<f64>,
    pub kl: Option<f64>,
    pub clap: Option<f64>,
    pub ssim: Option<f64>,
    pub si_sdr: Option<f64>,
    pub si_sdri: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub embedding: String,
    pub kl_definition: String,
    pub config: MetricsConfig,
    pub tasks: Vec<TaskMetrics>,
    /// Records whose audio could not be loaded or edited, with the reason.
    pub failures: Vec<(String, String)>,
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

impl MetricsReport {
    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with columns FAD, CLAP, KL, SSIM, SI-SDR, SI-SDRi.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# embedding: {}", self.embedding);
        let _ = writeln!(s, "# KL: {}", self.kl_definition);
        let _ = writeln!(
            s,
            "# SSIM: window {} hop {}, {}x{} cells; SI-SDR cap {} dB",
            self.config.stft_window, self.config.stft_hop, self.config.ssim_window, self.config.ssim_window, self.config.si_sdr_cap
        );
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>10} {:>6} {:>10} {:>7} {:>8} {:>8}",
            "task", "n", "FAD", "CLAP", "KL", "SSIM", "SI-SDR", "SI-SDRi"
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{:<8} {:>5} {:>10} {:>6} {:>10} {:>7} {:>8} {:>8}",
                t.task.to_string(),
                t.count,
                fmt_opt(t.fad, 4),
                fmt_opt(t.clap, 3),
                fmt_opt(t.kl, 4),
                fmt_opt(t.ssim, 4),
                fmt_opt(t.si_sdr, 2),
                fmt_opt(t.si_sdri, 2)
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "# {} record(s) failed", self.failures.len());
        }
        s
    }
}

struct PairResult {
    task: Task,
    ssim: f64,
    si_sdr: Option<f64>,
    si_sdri: Option<f64>,
    est_embedding: Mat,
    ref_embedding: Mat,
}

fn fit_length(w: Waveform, len: usize) -> Waveform {
    let mut samples = w.samples;
    samples.resize(len, 0.0);
    Waveform { samples, sample_rate: w.sample_rate }
}

fn evaluate_pair(
    record: &ManifestRecord,
    condition: &Waveform,
    target: &Waveform,
    editor: &dyn Editor,
    embedder: &dyn Embedder,
    cfg: &MetricsConfig,
) -> Result<PairResult> {
    let est = fit_length(editor.edit(&record.id, condition, &record.instruction)?, target.len());
    let cap = |x: f64| x.min(cfg.si_sdr_cap);
    let (si, sii) = match record.task {
        Task::Add => (None, None),
        Task::Remove | Task::Extract => {
            let a = cap(si_sdr(&est, target)?);
            let b = cap(si_sdr(condition, target)?);
            (Some(a), Some(if a == b { 0.0 } else { a - b }))
        }
    };
    Ok(PairResult {
        task: record.task,
        ssim: ssim(&est, target, cfg)?,
        si_sdr: si,
        si_sdri: sii,
        est_embedding: embedder.embed(&est)?,
        ref_embedding: embedder.embed(target)?,
    })
}

fn stack_rows(mats: &[&Mat]) -> Option<Mat> {
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).ok()
}

/// Edits every record and aggregates metrics per task. Per-record work runs in
/// parallel; results are combined in manifest order.
pub fn evaluate(
    manifest_dir: &Path,
    sample_rate: u32,
    records: &[ManifestRecord],
    editor: &dyn Editor,
    embedder: &dyn Embedder,
    cfg: &MetricsConfig,
) -> MetricsReport {
    let results: Vec<std::result::Result<PairResult, String>> = records
        .par_iter()
        .map(|r| {
            let (cond, target) = load_record_audio(r, manifest_dir, sample_rate).map_err(|e| e.to_string())?;
            evaluate_pair(r, &cond, &target, editor, embedder, cfg).map_err(|e| e.to_string())
        })
        .collect();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(p) => ok.push(p),
            Err(e) => {
                log::warn!("evaluation of {} failed: {e}", r.id);
                failures.push((r.id.clone(), e));
            }
        }
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let tasks = Task::ALL
        .iter()
        .map(|&task| {
            let rows: Vec<&PairResult> = ok.iter().filter(|p| p.task == task).collect();
            let est = stack_rows(&rows.iter().map(|p| &p.est_embedding).collect::<Vec<_>>());
            let refs = stack_rows(&rows.iter().map(|p| &p.ref_embedding).collect::<Vec<_>>());
            let (fad_v, kl_v) = match (est, refs) {
                (Some(e), Some(r)) => {
                    let f = EmbeddingSetStats::from_features(&e)
                        .and_then(|se| fad(&se, &EmbeddingSetStats::from_features(&r)?))
                        .ok();
                    (f, kl_div(&e, &r, cfg.variance_floor).ok())
                }
                _ => (None, None),
            };
            TaskMetrics {
                task,
                count: rows.len(),
                fad: fad_v,
                kl: kl_v,
                clap: None,
                ssim: mean(rows.iter().map(|p| p.ssim).collect()),
                si_sdr: mean(rows.iter().filter_map(|p| p.si_sdr).collect()),
                si_sdri: mean(rows.iter().filter_map(|p| p.si_sdri).collect()),
            }
        })
        .collect();
    MetricsReport {
        embedding: embedder.name(),
        kl_definition: "mean over embedding dimensions of KL(N_generated || N_reference), per-dimension Gaussian fits"
            .into(),
        config: cfg.clone(),
        tasks,
        failures,
    }
}
