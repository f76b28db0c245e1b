//! Log-Mel spectrograms (Slaney Mel scale, area-normalized triangles).

use ndarray::Array2;

use super::stft::{Stft, WindowKind};
use super::{FeatureKind, FeatureMatrix};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Added before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            n_fft: 1024,
            window: 1024,
            hop: 510,
            n_mels: 128,
            fmin: 0.0,
            fmax: 22_050.0,
            log_floor: 1e-6,
        }
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// `n_mels + 2` band edge frequencies in Hz.
pub fn mel_band_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `[n_mels × (n_fft/2+1)]` triangular filterbank.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let edges = mel_band_edges(cfg.n_mels, cfg.fmin, cfg.fmax);
    let mut fb = Array2::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (f2 - f0);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let lower = (f - f0) / (f1 - f0);
            let upper = (f2 - f) / (f2 - f1);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Un-pooled log-Mel spectrogram of mono samples at `cfg.sample_rate`.
pub fn mel_spectrogram(samples: &[f32], cfg: &MelConfig, track_id: &str) -> Result<FeatureMatrix> {
    let fb = mel_filterbank(cfg);
    let stft = Stft::new(WindowKind::Hann, cfg.window, cfg.hop, cfg.n_fft);
    let mut cols: Vec<f32> = Vec::new();
    let mut power = vec![0.0; stft.num_bins()];
    let frames = stft.for_each_frame(samples, |_, mags| {
        for (p, m) in power.iter_mut().zip(mags) {
            *p = m * m;
        }
        for row in fb.rows() {
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            cols.push((e + cfg.log_floor).ln() as f32);
        }
    })?;
    // cols is frame-major; transpose to rows × frames
    let data = Array2::from_shape_vec((frames, cfg.n_mels), cols)
        .expect("frame buffer size")
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    Ok(FeatureMatrix {
        kind: FeatureKind::Mel,
        data,
        frame_rate: cfg.sample_rate as f64 / cfg.hop as f64,
        track_id: track_id.to_string(),
    })
}
