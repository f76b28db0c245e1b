//! Framed short-time spectra shared by the Mel and HPCP extractors.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    /// 4-term Blackman-Harris (-92 dB sidelobes).
    BlackmanHarris,
}

pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    // periodic windows
    let n = len as f64;
    (0..len)
        .map(|i| {
            let x = 2.0 * PI * i as f64 / n;
            match kind {
                WindowKind::Hann => 0.5 - 0.5 * x.cos(),
                WindowKind::BlackmanHarris => {
                    0.35875 - 0.48829 * x.cos() + 0.14128 * (2.0 * x).cos() - 0.01168 * (3.0 * x).cos()
                }
            }
        })
        .collect()
}

/// Number of centered frames: `1 + floor(n / hop)`.
pub fn frame_count(n_samples: usize, window_len: usize, hop: usize) -> Result<usize> {
    if n_samples < window_len {
        return Err(Error::TooShort(format!(
            "{n_samples} samples is shorter than one {window_len}-sample analysis window"
        )));
    }
    Ok(1 + n_samples / hop)
}

/// Magnitude spectra of centered, zero-padded frames.
pub struct Stft {
    window: Vec<f64>,
    fft_len: usize,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(kind: WindowKind, window_len: usize, hop: usize, fft_len: usize) -> Self {
        assert!(fft_len >= window_len && hop > 0);
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Self {
            window: window(kind, window_len),
            fft_len,
            hop,
            fft,
        }
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Calls `f(frame_index, magnitudes)` for each frame in order.
    pub fn for_each_frame(&self, samples: &[f32], mut f: impl FnMut(usize, &[f64])) -> Result<usize> {
        let wlen = self.window.len();
        let frames = frame_count(samples.len(), wlen, self.hop)?;
        let half = wlen / 2;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mags = vec![0.0; self.num_bins()];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let center = t * self.hop;
            for (i, w) in self.window.iter().enumerate() {
                let idx = center as isize + i as isize - half as isize;
                if idx >= 0 && (idx as usize) < samples.len() {
                    buf[i].re = samples[idx as usize] as f64 * w;
                }
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mags.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            f(t, &mags);
        }
        Ok(frames)
    }
}
