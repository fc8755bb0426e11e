//! Synthetic multi-stem corpus and edit-triplet construction.
//!
//! Every stem is a sequence of notes and rests on the codec frame grid. A
//! sounding frame repeats one fixed template per (instrument, pitch), so all
//! stems are exactly frame-periodic within a note. Samples are rounded to the
//! 16-bit grid (`k / 32768`), which keeps sums of a handful of stems exact in
//! `f32` and makes the add/remove/extract mixing algebra hold bit for bit.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav_at, write_wav, WavEncoding, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub sample_rate: u32,
    /// Note grid rate; must match the codec frame rate.
    pub frame_rate: u32,
    pub instruments: Vec<String>,
    pub min_stems: usize,
    pub max_stems: usize,
    pub track_seconds: f64,
    pub clip_seconds: f64,
    /// Peak amplitude of each stem.
    pub stem_gain: f64,
    pub rest_probability: f64,
    pub max_note_frames: usize,
    /// Chance that a stem gets one long silent stretch.
    pub gap_probability: f64,
    pub silence_frame_ms: f64,
    pub silence_threshold: f64,
    pub max_offset_attempts: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_rate: 50,
            instruments: ["drums", "bass", "piano", "guitar"].map(String::from).to_vec(),
            min_stems: 2,
            max_stems: 4,
            track_seconds: 12.0,
            clip_seconds: 5.0,
            stem_gain: 0.25,
            rest_probability: 0.2,
            max_note_frames: 4,
            gap_probability: 0.5,
            silence_frame_ms: 25.0,
            silence_threshold: 1e-3,
            max_offset_attempts: 16,
        }
    }
}

impl DatagenConfig {
    pub fn hop(&self) -> Result<usize> {
        if self.frame_rate == 0 || !self.sample_rate.is_multiple_of(self.frame_rate) {
            return Err(Error::config("datagen sample rate must be a multiple of its frame rate"));
        }
        Ok((self.sample_rate / self.frame_rate) as usize)
    }

    pub fn clip_frames(&self) -> usize {
        (self.clip_seconds * self.frame_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.hop()?;
        for label in &self.instruments {
            Instrument::from_label(label)?;
        }
        if self.instruments.is_empty() || self.min_stems == 0 || self.min_stems > self.max_stems {
            return Err(Error::config("need 1 <= min_stems <= max_stems and a nonempty instrument list"));
        }
        if self.max_stems > self.instruments.len() {
            return Err(Error::config("max_stems exceeds the instrument vocabulary"));
        }
        if self.clip_frames() == 0 || self.max_note_frames == 0 {
            return Err(Error::config("clip and note lengths must be at least one frame"));
        }
        Ok(())
    }
}

/// Waveform family of a stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instrument {
    Drums,
    Bass,
    Piano,
    Guitar,
}

impl Instrument {
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "drums" => Ok(Self::Drums),
            "bass" => Ok(Self::Bass),
            "piano" => Ok(Self::Piano),
            "guitar" => Ok(Self::Guitar),
            other => Err(Error::config(format!("no synthesizer for instrument {other:?}"))),
        }
    }

    /// Number of distinct sounding states (pitches or hit types).
    fn voices(self) -> usize {
        3
    }

    /// One frame of the sounding state `voice`, peak-normalized.
    fn template(self, voice: usize, hop: usize, sample_rate: u32) -> Vec<f64> {
        let sr = sample_rate as f64;
        let tone = |f0: f64, partials: &[(f64, f64)]| -> Vec<f64> {
            (0..hop)
                .map(|n| partials.iter().map(|&(k, a)| a * (2.0 * PI * k * f0 * n as f64 / sr).sin()).sum())
                .collect()
        };
        let raw = match self {
            Self::Bass => tone([100.0, 150.0, 200.0][voice], &[(1.0, 1.0)]),
            Self::Piano => tone([300.0, 400.0, 500.0][voice], &[(1.0, 1.0), (3.0, -1.0 / 9.0), (5.0, 1.0 / 25.0)]),
            Self::Guitar => tone([650.0, 750.0, 850.0][voice], &[(1.0, 1.0), (2.0, 0.5), (3.0, 1.0 / 3.0)]),
            Self::Drums => {
                let mut state: u32 = 0x9e37_79b9 ^ (voice as u32 + 1).wrapping_mul(0x85eb_ca6b);
                let mut noise = || {
                    state ^= state << 13;
                    state ^= state >> 17;
                    state ^= state << 5;
                    state as f64 / u32::MAX as f64 * 2.0 - 1.0
                };
                let decay = [0.008, 0.004, 0.0015][voice] * sr;
                let mut prev = 0.0;
                (0..hop)
                    .map(|n| {
                        let env = (-(n as f64) / decay).exp();
                        let x = match voice {
                            0 => (2.0 * PI * 60.0 * n as f64 / sr).sin(),
                            1 => noise(),
                            _ => {
                                let w = noise();
                                let d = w - prev;
                                prev = w;
                                d
                            }
                        };
                        x * env
                    })
                    .collect()
            }
        };
        let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        raw.into_iter().map(|v| v / peak).collect()
    }
}

/// Rounds to the 16-bit sample grid.
fn quantize16(v: f64) -> f32 {
    ((v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub instrument_label: String,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub stems: Vec<Stem>,
    pub duration: f64,
}

impl Track {
    pub fn stem(&self, label: &str) -> Option<&Stem> {
        self.stems.iter().find(|s| s.instrument_label == label)
    }

    pub fn len(&self) -> usize {
        self.stems.first().map_or(0, |s| s.waveform.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renders one seeded track with `n_stems` distinct instruments.
pub fn gen_synthetic_track(seed: u64, n_stems: usize, duration: f64, cfg: &DatagenConfig) -> Result<Track> {
    cfg.validate()?;
    if n_stems < 1 || n_stems > cfg.instruments.len() {
        return Err(Error::input(format!("cannot draw {n_stems} stems from {} instruments", cfg.instruments.len())));
    }
    let hop = cfg.hop()?;
    let frames = (duration * cfg.frame_rate as f64).round() as usize;
    if frames == 0 {
        return Err(Error::input("track shorter than one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample_indices(&mut rng, cfg.instruments.len(), n_stems).into_vec();
    chosen.sort_unstable();

    let mut stems = Vec::with_capacity(n_stems);
    for idx in chosen {
        let label = &cfg.instruments[idx];
        let inst = Instrument::from_label(label)?;
        let templates: Vec<Vec<f32>> = (0..inst.voices())
            .map(|v| inst.template(v, hop, cfg.sample_rate).into_iter().map(|x| quantize16(x * cfg.stem_gain)).collect())
            .collect();

        let mut states: Vec<Option<usize>> = Vec::with_capacity(frames);
        while states.len() < frames {
            let len = rng.gen_range(1..=cfg.max_note_frames);
            let state =
                if rng.gen_bool(cfg.rest_probability) { None } else { Some(rng.gen_range(0..inst.voices())) };
            states.extend(std::iter::repeat_n(state, len));
        }
        states.truncate(frames);
        if rng.gen_bool(cfg.gap_probability) {
            let gap = rng.gen_range((frames / 10).max(1)..=(frames / 4).max(1));
            let start = rng.gen_range(0..=frames - gap);
            states[start..start + gap].fill(None);
        }

        let mut samples = Vec::with_capacity(frames * hop);
        for state in states {
            match state {
                Some(v) => samples.extend_from_slice(&templates[v]),
                None => samples.extend(std::iter::repeat_n(0.0f32, hop)),
            }
        }
        stems.push(Stem { instrument_label: label.clone(), waveform: Waveform { samples, sample_rate: cfg.sample_rate } });
    }
    Ok(Track { track_id: format!("track{seed:08x}"), stems, duration: frames as f64 / cfg.frame_rate as f64 })
}

/// Sample-wise sum. No clipping is applied.
pub fn mix(stems: &[&Waveform]) -> Result<Waveform> {
    let first = stems.first().ok_or_else(|| Error::input("nothing to mix"))?;
    let mut out = (*first).clone();
    for w in &stems[1..] {
        if w.len() != out.len() || w.sample_rate != out.sample_rate {
            return Err(Error::input(format!(
                "cannot mix {} samples @ {} Hz with {} samples @ {} Hz",
                out.len(),
                out.sample_rate,
                w.len(),
                w.sample_rate
            )));
        }
        for (o, s) in out.samples.iter_mut().zip(&w.samples) {
            *o += s;
        }
    }
    Ok(out)
}

fn mix_or_silence(stems: &[&Waveform], len: usize, sample_rate: u32) -> Result<Waveform> {
    if stems.is_empty() {
        Ok(Waveform::silence(len, sample_rate))
    } else {
        mix(stems)
    }
}

/// Fraction of non-overlapping `frame_ms` frames whose RMS is below `rms_threshold`.
/// A trailing partial frame is ignored unless it is the only frame.
pub fn silence_fraction(w: &Waveform, frame_ms: f64, rms_threshold: f64) -> f64 {
    if w.is_empty() {
        return 1.0;
    }
    let frame = ((frame_ms / 1000.0 * w.sample_rate as f64).round() as usize).clamp(1, w.len());
    let chunks: Vec<&[f32]> = w.samples.chunks_exact(frame).collect();
    let silent = chunks
        .iter()
        .filter(|c| {
            let ms = c.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / c.len() as f64;
            ms.sqrt() < rms_threshold
        })
        .count();
    silent as f64 / chunks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Add,
    Remove,
    Extract,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Add, Task::Remove, Task::Extract];

    pub fn instruction(self, label: &str) -> String {
        match self {
            Task::Add => format!("Add {label}"),
            Task::Remove => format!("Remove {label}"),
            Task::Extract => format!("Extract {label}"),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Add => "add",
            Task::Remove => "remove",
            Task::Extract => "extract",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditTriplet {
    pub instruction: String,
    pub condition: Waveform,
    pub target: Waveform,
    pub task: Task,
    pub target_stem_label: String,
    /// The target stem over the same clip.
    pub stem: Waveform,
    pub offset_seconds: f64,
    pub n_other_stems: usize,
}

/// Why a track produced no triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSkip {
    pub track_id: String,
    pub reason: String,
}

impl fmt::Display for TripletSkip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "track {} skipped: {}", self.track_id, self.reason)
    }
}

/// Draws task, target stem, accompanying stems and a clip offset, then mixes.
pub fn sample_triplet(
    track: &Track,
    rng: &mut impl Rng,
    cfg: &DatagenConfig,
) -> Result<EditTriplet, TripletSkip> {
    let skip = |reason: String| TripletSkip { track_id: track.track_id.clone(), reason };
    if track.stems.is_empty() {
        return Err(skip("track has no stems".into()));
    }
    let hop = cfg.hop().map_err(|e| skip(e.to_string()))?;
    let clip_frames = cfg.clip_frames();
    let track_frames = track.len() / hop;
    if track_frames < clip_frames {
        return Err(skip(format!("track has {track_frames} frames, clip needs {clip_frames}")));
    }

    let task = Task::ALL[rng.gen_range(0..3)];
    let target_idx = rng.gen_range(0..track.stems.len());
    let pool: Vec<usize> = (0..track.stems.len()).filter(|&i| i != target_idx).collect();
    let min_others = if task == Task::Add { 0 } else { 1.min(pool.len()) };
    let n_others = rng.gen_range(min_others..=pool.len());
    let mut others: Vec<usize> =
        sample_indices(rng, pool.len(), n_others).into_iter().map(|i| pool[i]).collect();
    others.sort_unstable();

    let clip_len = clip_frames * hop;
    let target_stem = &track.stems[target_idx];
    for _ in 0..cfg.max_offset_attempts.max(1) {
        let offset = rng.gen_range(0..=track_frames - clip_frames) * hop;
        let stem = target_stem.waveform.slice(offset, clip_len).map_err(|e| skip(e.to_string()))?;
        if silence_fraction(&stem, cfg.silence_frame_ms, cfg.silence_threshold) > 0.5 {
            continue;
        }
        let other_clips: Vec<Waveform> = others
            .iter()
            .map(|&i| track.stems[i].waveform.slice(offset, clip_len))
            .collect::<Result<_>>()
            .map_err(|e| skip(e.to_string()))?;
        let other_refs: Vec<&Waveform> = other_clips.iter().collect();
        let accompaniment = mix_or_silence(&other_refs, clip_len, cfg.sample_rate).map_err(|e| skip(e.to_string()))?;
        let full = mix(&[&accompaniment, &stem]).map_err(|e| skip(e.to_string()))?;
        let (condition, target) = match task {
            Task::Add => (accompaniment, full),
            Task::Remove => (full, accompaniment),
            Task::Extract => (full, stem.clone()),
        };
        return Ok(EditTriplet {
            instruction: task.instruction(&target_stem.instrument_label),
            condition,
            target,
            task,
            target_stem_label: target_stem.instrument_label.clone(),
            stem,
            offset_seconds: offset as f64 / cfg.sample_rate as f64,
            n_other_stems: n_others,
        });
    }
    Err(skip(format!(
        "no clip offset with at most 50% silence in {:?} after {} attempts",
        target_stem.instrument_label, cfg.max_offset_attempts
    )))
}

/// One line of the triplet manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub task: Task,
    pub instruction: String,
    pub condition_path: String,
    pub target_path: String,
    pub target_stem: String,
    pub n_other_stems: usize,
    pub offset_seconds: f64,
    pub seed: u64,
    pub track_id: String,
}

/// SplitMix64 step, used to derive independent per-record seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws `count` triplets; record `i` depends only on `(tracks, seed, i)`.
pub fn plan_triplets(
    tracks: &[Track],
    count: usize,
    seed: u64,
    cfg: &DatagenConfig,
) -> Result<Vec<(ManifestRecord, EditTriplet)>> {
    if count == 0 {
        return Err(Error::input("triplet count must be at least 1"));
    }
    if tracks.is_empty() {
        return Err(Error::input("no tracks to draw triplets from"));
    }
    const MAX_DRAWS: u64 = 256;
    (0..count)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_DRAWS {
                let record_seed = derive_seed(seed, ((i as u64) << 16) | attempt);
                let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
                let track = &tracks[rng.gen_range(0..tracks.len())];
                match sample_triplet(track, &mut rng, cfg) {
                    Ok(t) => {
                        let id = format!("t{i:06}");
                        let record = ManifestRecord {
                            condition_path: format!("audio/{id}_cond.wav"),
                            target_path: format!("audio/{id}_target.wav"),
                            id,
                            task: t.task,
                            instruction: t.instruction.clone(),
                            target_stem: t.target_stem_label.clone(),
                            n_other_stems: t.n_other_stems,
                            offset_seconds: t.offset_seconds,
                            seed: record_seed,
                            track_id: track.track_id.clone(),
                        };
                        return Ok((record, t));
                    }
                    Err(s) => log::debug!("{s}"),
                }
            }
            Err(Error::input(format!("record {i}: every drawn track was skipped")))
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `{out_dir}/audio/{id}_{cond|target}.wav` and `{out_dir}/manifest.jsonl`.
pub fn build_manifest(tracks: &[Track], count: usize, seed: u64, out_dir: &Path, cfg: &DatagenConfig) -> Result<PathBuf> {
    let planned = plan_triplets(tracks, count, seed, cfg)?;
    planned.par_iter().try_for_each(|(r, t)| {
        write_wav(&out_dir.join(&r.condition_path), &t.condition, WavEncoding::Float32)?;
        write_wav(&out_dir.join(&r.target_path), &t.target, WavEncoding::Float32)
    })?;
    let path = out_dir.join(MANIFEST_FILE);
    let records: Vec<&ManifestRecord> = planned.iter().map(|(r, _)| r).collect();
    write_jsonl(&path, &records)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_jsonl(path)
}

/// Loads the (condition, target) pair of a record.
pub fn load_record_audio(record: &ManifestRecord, base_dir: &Path, sample_rate: u32) -> Result<(Waveform, Waveform)> {
    Ok((
        read_wav_at(&base_dir.join(&record.condition_path), sample_rate)?,
        read_wav_at(&base_dir.join(&record.target_path), sample_rate)?,
    ))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Corpus index entry written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub track_id: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub duration_seconds: f64,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Generates `n_tracks` tracks with stem counts in `min_stems..=max_stems`.
pub fn gen_corpus(n_tracks: usize, seed: u64, cfg: &DatagenConfig) -> Result<Vec<(CorpusEntry, Track)>> {
    cfg.validate()?;
    (0..n_tracks)
        .into_par_iter()
        .map(|i| {
            let track_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(track_seed);
            let n_stems = rng.gen_range(cfg.min_stems..=cfg.max_stems);
            let track = gen_synthetic_track(track_seed, n_stems, cfg.track_seconds, cfg)?;
            let entry = CorpusEntry {
                track_id: track.track_id.clone(),
                seed: track_seed,
                labels: track.stems.iter().map(|s| s.instrument_label.clone()).collect(),
                duration_seconds: track.duration,
            };
            Ok((entry, track))
        })
        .collect()
}

/// Writes `{dir}/tracks/{id}/{label}.wav` plus the `corpus.jsonl` index.
pub fn write_corpus(dir: &Path, corpus: &[(CorpusEntry, Track)]) -> Result<PathBuf> {
    corpus.par_iter().try_for_each(|(_, t)| {
        t.stems.iter().try_for_each(|s| {
            let path = dir.join("tracks").join(&t.track_id).join(format!("{}.wav", s.instrument_label));
            write_wav(&path, &s.waveform, WavEncoding::Float32)
        })
    })?;
    let path = dir.join(CORPUS_FILE);
    let entries: Vec<&CorpusEntry> = corpus.iter().map(|(e, _)| e).collect();
    write_jsonl(&path, &entries)?;
    Ok(path)
}

pub fn load_corpus(dir: &Path, sample_rate: u32) -> Result<Vec<Track>> {
    let entries: Vec<CorpusEntry> = read_jsonl(&dir.join(CORPUS_FILE))?;
    entries
        .into_par_iter()
        .map(|e| {
            let stems = e
                .labels
                .iter()
                .map(|label| {
                    let path = dir.join("tracks").join(&e.track_id).join(format!("{label}.wav"));
                    Ok(Stem { instrument_label: label.clone(), waveform: read_wav_at(&path, sample_rate)? })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Track { track_id: e.track_id, stems, duration: e.duration_seconds })
        })
        .collect()
}

/// Text-described clips for base-model pretraining: random non-empty stem
/// subsets at frame-aligned offsets, described as e.g. `"bass and drums"`.
pub fn description_clips(tracks: &[Track], count: usize, seed: u64, cfg: &DatagenConfig) -> Result<Vec<(String, Waveform)>> {
    if tracks.is_empty() {
        return Err(Error::input("no tracks"));
    }
    let hop = cfg.hop()?;
    let clip_frames = cfg.clip_frames();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5eed, i as u64));
            let track = &tracks[rng.gen_range(0..tracks.len())];
            let track_frames = track.len() / hop;
            if track_frames < clip_frames {
                return Err(Error::input(format!("track {} shorter than a clip", track.track_id)));
            }
            let k = rng.gen_range(1..=track.stems.len());
            let mut picked = sample_indices(&mut rng, track.stems.len(), k).into_vec();
            picked.sort_unstable();
            let offset = rng.gen_range(0..=track_frames - clip_frames) * hop;
            let clips: Vec<Waveform> = picked
                .iter()
                .map(|&s| track.stems[s].waveform.slice(offset, clip_frames * hop))
                .collect::<Result<_>>()?;
            let refs: Vec<&Waveform> = clips.iter().collect();
            let labels: Vec<&str> = picked.iter().map(|&s| track.stems[s].instrument_label.as_str()).collect();
            Ok((labels.join(" and "), mix(&refs)?))
        })
        .collect()
}
