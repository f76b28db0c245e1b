//! Harmonic pitch class profiles.
//!
//! Per frame: spectral peaks in a frequency band are located (with parabolic
//! interpolation on the dB spectrum), each peak's squared magnitude is spread
//! over neighbouring pitch classes with a cos² window, and the frame is
//! normalized by its maximum. Bin 0 is the reference pitch class (A at 440 Hz),
//! bin k is k semitones above it.

use std::f64::consts::PI;

use ndarray::Array2;

use super::stft::{Stft, WindowKind};
use super::{FeatureKind, FeatureMatrix};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct HpcpConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    /// FFT length = window × zero_pad.
    pub zero_pad: usize,
    pub min_hz: f64,
    pub max_hz: f64,
    pub reference_hz: f64,
    /// Peaks this many dB below the frame maximum are ignored.
    pub peak_threshold_db: f64,
    /// Full width of the cos² weighting window, in semitones.
    pub window_semitones: f64,
    pub bins: usize,
}

impl Default for HpcpConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            window: 4096,
            hop: 2040,
            zero_pad: 4,
            min_hz: 40.0,
            max_hz: 5000.0,
            reference_hz: 440.0,
            peak_threshold_db: 60.0,
            window_semitones: 4.0 / 3.0,
            bins: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub freq: f64,
    pub magnitude: f64,
}

fn to_db(m: f64) -> f64 {
    20.0 * m.max(1e-30).log10()
}

/// Interpolated local maxima of `mags` inside `[min_hz, max_hz]`.
pub fn find_peaks(mags: &[f64], bin_hz: f64, cfg: &HpcpConfig) -> Vec<SpectralPeak> {
    let lo = ((cfg.min_hz / bin_hz).ceil() as usize).max(1);
    let hi = ((cfg.max_hz / bin_hz).floor() as usize).min(mags.len().saturating_sub(2));
    if lo > hi {
        return Vec::new();
    }
    let frame_max = mags[lo..=hi].iter().cloned().fold(0.0, f64::max);
    if frame_max <= 0.0 {
        return Vec::new();
    }
    let floor_db = to_db(frame_max) - cfg.peak_threshold_db;
    let mut peaks = Vec::new();
    for k in lo..=hi {
        let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
        if !(b > a && b >= c) {
            continue;
        }
        let (da, db, dc) = (to_db(a), to_db(b), to_db(c));
        if db < floor_db {
            continue;
        }
        let denom = da - 2.0 * db + dc;
        let p = if denom.abs() > 0.0 {
            0.5 * (da - dc) / denom
        } else {
            0.0
        };
        let peak_db = db - 0.25 * (da - dc) * p;
        peaks.push(SpectralPeak {
            freq: (k as f64 + p) * bin_hz,
            magnitude: 10f64.powf(peak_db / 20.0),
        });
    }
    peaks
}

/// Un-normalized pitch-class profile of a set of peaks.
pub fn accumulate_profile(peaks: &[SpectralPeak], cfg: &HpcpConfig) -> Vec<f64> {
    let n = cfg.bins as f64;
    let half = cfg.window_semitones / 2.0;
    let mut profile = vec![0.0; cfg.bins];
    for pk in peaks {
        let pos = n * (pk.freq / cfg.reference_hz).log2();
        let energy = pk.magnitude * pk.magnitude;
        for (b, slot) in profile.iter_mut().enumerate() {
            let d = (pos - b as f64).rem_euclid(n);
            let d = if d >= n / 2.0 { d - n } else { d };
            if d.abs() <= half {
                let w = (PI * d / cfg.window_semitones).cos();
                *slot += w * w * energy;
            }
        }
    }
    profile
}

/// Max-normalize in place; all-zero profiles stay zero.
pub fn normalize_max(profile: &mut [f64]) {
    let m = profile.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        profile.iter_mut().for_each(|v| *v /= m);
    }
}

pub fn hpcp(samples: &[f32], cfg: &HpcpConfig, track_id: &str) -> Result<FeatureMatrix> {
    let fft_len = cfg.window * cfg.zero_pad.max(1);
    let stft = Stft::new(WindowKind::BlackmanHarris, cfg.window, cfg.hop, fft_len);
    let bin_hz = cfg.sample_rate as f64 / fft_len as f64;
    let mut cols: Vec<f32> = Vec::new();
    let frames = stft.for_each_frame(samples, |_, mags| {
        let peaks = find_peaks(mags, bin_hz, cfg);
        let mut profile = accumulate_profile(&peaks, cfg);
        normalize_max(&mut profile);
        cols.extend(profile.iter().map(|&v| v as f32));
    })?;
    let data = Array2::from_shape_vec((frames, cfg.bins), cols)
        .expect("frame buffer size")
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    Ok(FeatureMatrix {
        kind: FeatureKind::Hpcp,
        data,
        frame_rate: cfg.sample_rate as f64 / cfg.hop as f64,
        track_id: track_id.to_string(),
    })
}
