//! Mono waveforms and WAV file I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::input("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::input(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or_else(|| Error::input(format!("slice {start}+{len} exceeds {} samples", self.samples.len())))?;
        Ok(Self { samples: self.samples[start..end].to_vec(), sample_rate: self.sample_rate })
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    /// 32-bit IEEE float; lossless for every in-memory waveform.
    Float32,
    /// 16-bit PCM; the signal is peak-normalized first if it would clip.
    Pcm16,
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<Result<_, _>>().map_err(|e| wav_error(path, e))?
        }
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (format, bits) => {
            return Err(Error::format(path, format!("unsupported sample format {format:?}/{bits} bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a WAV file and checks its sample rate against `expected_rate`.
pub fn read_wav_at(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate != expected_rate {
        return Err(Error::format(
            path,
            format!("sample rate {} Hz does not match configured {expected_rate} Hz", w.sample_rate),
        ));
    }
    Ok(w)
}

pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (bits, format) = match encoding {
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: bits, sample_format: format };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    match encoding {
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s).map_err(|e| wav_error(path, e))?;
            }
        }
        WavEncoding::Pcm16 => {
            let peak = w.peak();
            let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
            for &s in &w.samples {
                let v = (s * gain * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(|e| wav_error(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::format(path, other.to_string()),
    }
}
