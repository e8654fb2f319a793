//! Music features at the motion frame rate, plus synthetic scenarios.

pub mod audio;
pub mod synth;

use std::path::Path;

use crate::body::DEFAULT_FPS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use synth::{synth_scenario, Pattern, SynthSpec, SyntheticScenario};

pub const MIN_SAMPLE_RATE: u32 = 8000;
pub const EXTERNAL_LAYOUT: &str = "external";

/// Column blocks of the built-in layout, in order.
pub const DEFAULT_LAYOUT: [(&str, usize); 4] = [("mfcc", 13), ("mfcc_delta", 13), ("onset", 1), ("beat", 1)];

pub fn default_layout() -> Vec<(String, usize)> {
    DEFAULT_LAYOUT.iter().map(|(n, w)| (n.to_string(), *w)).collect()
}

/// `T × d` features with named column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicFeatures {
    pub data: Tensor,
    pub fps: f64,
    pub layout: Vec<(String, usize)>,
}

impl MusicFeatures {
    pub fn new(data: Tensor, fps: f64, layout: Vec<(String, usize)>) -> Result<Self> {
        let f = MusicFeatures { data, fps, layout };
        f.validate()?;
        Ok(f)
    }

    /// Features computed elsewhere, e.g. the full 438-column set.
    pub fn external(data: Tensor, fps: f64) -> Result<Self> {
        let d = data.cols();
        MusicFeatures::new(data, fps, vec![(EXTERNAL_LAYOUT.to_string(), d)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.shape().len() != 2 || self.data.rows() == 0 {
            return Err(Error::invalid("features must be a non-empty T x d matrix"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("feature frame rate must be positive"));
        }
        let width: usize = self.layout.iter().map(|b| b.1).sum();
        if width != self.data.cols() {
            return Err(Error::invalid(format!(
                "layout covers {width} columns, matrix has {}",
                self.data.cols()
            )));
        }
        if !self.data.is_finite() {
            return Err(Error::invalid("features contain non-finite values"));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Layout as `name:width` pairs joined by commas.
    pub fn layout_string(&self) -> String {
        self.layout
            .iter()
            .map(|(n, w)| format!("{n}:{w}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_layout(s: &str) -> Result<Vec<(String, usize)>> {
        s.split(',')
            .map(|part| {
                let (name, w) = part
                    .rsplit_once(':')
                    .ok_or_else(|| Error::invalid(format!("bad layout block `{part}`")))?;
                let w = w
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layout width in `{part}`")))?;
                Ok((name.to_string(), w))
            })
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for (n, w) in &self.layout {
            if n == name {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }

    /// Frames flagged in the one-hot beat column.
    pub fn beat_frames(&self) -> Result<Vec<usize>> {
        let col = self
            .block("beat")
            .ok_or_else(|| Error::UndefinedMetric("features have no beat column".into()))?
            .start;
        Ok((0..self.frames()).filter(|&t| self.data.at(t, col) > 0.5).collect())
    }

    pub fn onset(&self) -> Option<Vec<f64>> {
        let col = self.block("onset")?.start;
        Some((0..self.frames()).map(|t| self.data.at(t, col)).collect())
    }

    /// Rows `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<MusicFeatures> {
        if start + len > self.frames() || len == 0 {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.frames()
            )));
        }
        let d = self.dim();
        let data = Tensor::matrix(len, d, self.data.data()[start * d..(start + len) * d].to_vec());
        MusicFeatures::new(data, self.fps, self.layout.clone())
    }
}

/// MFCC, MFCC delta, onset strength and one-hot beats at 30 FPS.
pub fn extract_features(samples: &[f64], sample_rate: u32) -> Result<MusicFeatures> {
    if sample_rate < MIN_SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} Hz is below {MIN_SAMPLE_RATE} Hz"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("audio contains non-finite samples"));
    }
    let sr = sample_rate as f64;
    let frames = (samples.len() as f64 * DEFAULT_FPS / sr).floor() as usize;
    if frames == 0 {
        return Err(Error::invalid(format!(
            "{} samples at {sample_rate} Hz is shorter than one frame",
            samples.len()
        )));
    }
    let log_mel = audio::log_mel_frames(samples, sr, DEFAULT_FPS, frames);
    let mfcc: Vec<Vec<f64>> = log_mel.iter().map(|r| audio::dct2(r, audio::N_MFCC)).collect();
    let delta = audio::deltas(&mfcc);
    let onset = audio::onset_envelope(&log_mel);
    let beats = audio::estimate_period(&onset, DEFAULT_FPS)
        .map(|p| audio::pick_beats(&onset, p))
        .unwrap_or_default();
    let width: usize = DEFAULT_LAYOUT.iter().map(|b| b.1).sum();
    let mut data = Vec::with_capacity(frames * width);
    for t in 0..frames {
        data.extend_from_slice(&mfcc[t]);
        data.extend_from_slice(&delta[t]);
        data.push(onset[t]);
        data.push(if beats.binary_search(&t).is_ok() { 1.0 } else { 0.0 });
    }
    MusicFeatures::new(Tensor::matrix(frames, width, data), DEFAULT_FPS, default_layout())
}

/// 16-bit PCM WAV; the first channel of multi-channel files.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            offset: 0,
            message: format!("{}: only 16-bit PCM WAV is supported", path.display()),
        });
    }
    let channels = spec.channels.max(1) as usize;
    let samples = reader
        .samples::<i16>()
        .step_by(channels)
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Nearest 16-bit PCM code; [`read_wav`] maps it back to `code / 32768`.
pub fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Mono 16-bit PCM WAV bytes.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::invalid(format!("wav encoding: {e}"));
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut w = hound::WavWriter::new(&mut buf, spec).map_err(wav_err)?;
    for s in samples {
        w.write_sample(pcm16(*s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)?;
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    crate::io::write_atomic(path, &encode_wav(samples, sample_rate)?)
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            message: format!("{}: {other}", path.display()),
        },
    }
}

pub fn save_features(features: &MusicFeatures, path: &Path) -> Result<()> {
    crate::io::write_features(features, path)
}

pub fn load_features(path: &Path) -> Result<MusicFeatures> {
    crate::io::read_features(path)
}

/// Click train: short decaying bursts at `beat_times` seconds.
pub fn click_train(duration_s: f64, sample_rate: u32, beat_times: &[f64]) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut out = vec![0.0; n];
    let len = (0.01 * sr) as usize;
    for &b in beat_times {
        let start = (b * sr).round() as usize;
        for i in 0..len {
            if start + i < n {
                let env = (-(i as f64) / (0.002 * sr)).exp();
                out[start + i] += 0.8 * env * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin();
            }
        }
    }
    out
}
