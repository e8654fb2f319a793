//! Short-time spectral analysis: mel filterbank, MFCC, onset envelope, beats.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const N_MELS: usize = 40;
pub const N_MFCC: usize = 13;
pub const MEL_FMIN: f64 = 20.0;
const LOG_FLOOR: f64 = 1e-10;
const DELTA_WIDTH: usize = 2;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK filters over FFT bins `0..=n_fft/2`.
pub fn mel_filterbank(sample_rate: f64, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(MEL_FMIN), hz_to_mel(sample_rate / 2.0));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log mel energies, one row per 30 FPS frame centred at `t·hop`.
pub fn log_mel_frames(samples: &[f64], sample_rate: f64, fps: f64, frames: usize) -> Vec<Vec<f64>> {
    let hop = sample_rate / fps;
    let n_fft = (hop.ceil() as usize).next_power_of_two();
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
        .collect();
    let bank = mel_filterbank(sample_rate, n_fft, N_MELS);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..frames)
        .map(|t| {
            let center = (t as f64 * hop).round() as i64;
            let start = center - (n_fft / 2) as i64;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as i64;
                let v = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *b = Complex::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            bank.iter()
                .map(|filt| {
                    let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                    e.max(LOG_FLOOR).ln()
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `n` coefficients.
pub fn dct2(x: &[f64], n: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * scale
        })
        .collect()
}

/// Regression deltas over ±2 frames with edge replication.
pub fn deltas(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = rows.len();
    let norm: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..rows[i].len())
                .map(|k| {
                    (1..=DELTA_WIDTH)
                        .map(|n| {
                            let ahead = rows[(i + n).min(t - 1)][k];
                            let behind = rows[i.saturating_sub(n)][k];
                            n as f64 * (ahead - behind)
                        })
                        .sum::<f64>()
                        / norm
                })
                .collect()
        })
        .collect()
}

/// Half-wave-rectified spectral flux of the log mel spectrogram.
pub fn onset_envelope(log_mel: &[Vec<f64>]) -> Vec<f64> {
    (0..log_mel.len())
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            log_mel[t]
                .iter()
                .zip(&log_mel[t - 1])
                .map(|(a, b)| (a - b).max(0.0))
                .sum()
        })
        .collect()
}

pub const TEMPO_RANGE_BPM: (f64, f64) = (60.0, 180.0);

/// Beat period in frames from the onset autocorrelation; `None` when the
/// envelope carries no energy.
pub fn estimate_period(onset: &[f64], fps: f64) -> Option<usize> {
    let peak = onset.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return None;
    }
    let min_lag = (fps * 60.0 / TEMPO_RANGE_BPM.1).round() as usize;
    let max_lag = (fps * 60.0 / TEMPO_RANGE_BPM.0).round() as usize;
    let mean = onset.iter().sum::<f64>() / onset.len() as f64;
    let centred: Vec<f64> = onset.iter().map(|v| v - mean).collect();
    let scores: Vec<(usize, f64)> = (min_lag..=max_lag.min(onset.len().saturating_sub(1)))
        .map(|lag| {
            let n = onset.len() - lag;
            let s: f64 = (0..n).map(|i| centred[i] * centred[i + lag]).sum();
            (lag, s / n as f64)
        })
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return None;
    }
    // prefer the fastest tempo that is nearly as periodic as the best one,
    // which avoids locking onto sub-harmonics
    scores.iter().find(|s| s.1 >= 0.9 * best).map(|s| s.0)
}

/// Beat frames: best phase for the period, each beat snapped to the local
/// onset maximum within a quarter period.
pub fn pick_beats(onset: &[f64], period: usize) -> Vec<usize> {
    let t = onset.len();
    if period == 0 || t == 0 {
        return Vec::new();
    }
    let peak = onset.iter().cloned().fold(0.0, f64::max);
    let floor = 0.1 * peak;
    let phase = (0..period.min(t))
        .max_by(|&a, &b| {
            let sa: f64 = onset.iter().skip(a).step_by(period).sum();
            let sb: f64 = onset.iter().skip(b).step_by(period).sum();
            sa.total_cmp(&sb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let radius = (period / 4).max(1);
    let mut beats: Vec<usize> = Vec::new();
    let mut expected = phase;
    while expected < t {
        let lo = expected.saturating_sub(radius);
        let hi = (expected + radius).min(t - 1);
        let best = (lo..=hi)
            .max_by(|&a, &b| onset[a].total_cmp(&onset[b]).then(b.cmp(&a)))
            .unwrap_or(expected);
        if onset[best] > floor && beats.last().is_none_or(|&l| best > l) {
            beats.push(best);
        }
        expected += period;
    }
    beats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for f in [20.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985).abs() < 0.01);
    }

    #[test]
    fn filters_are_triangles_covering_the_band() {
        let bank = mel_filterbank(22050.0, 1024, N_MELS);
        assert_eq!(bank.len(), N_MELS);
        for f in &bank {
            let peak = f.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.2 && peak <= 1.0, "{peak}");
        }
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let c = dct2(&[2.0; 8], 4);
        assert!((c[0] - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn deltas_of_ramp() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let d = deltas(&rows);
        assert!((d[5][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_onsets() {
        let mut onset = vec![0.0; 150];
        for t in (3..150).step_by(15) {
            onset[t] = 1.0;
        }
        assert_eq!(estimate_period(&onset, 30.0), Some(15));
        let beats = pick_beats(&onset, 15);
        assert_eq!(beats, (3..150).step_by(15).collect::<Vec<_>>());
        assert_eq!(estimate_period(&vec![0.0; 100], 30.0), None);
    }
}
