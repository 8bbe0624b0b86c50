use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Reflect index into `0..len` with period `2 * (len - 1)`, like numpy's `reflect` mode.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Centered STFT with Hann window and reflect padding.
pub struct Stft {
    pub frame: usize,
    pub hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(frame: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            frame,
            hop,
            window: hann(frame),
            forward: planner.plan_fft_forward(frame),
            inverse: planner.plan_fft_inverse(frame),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.frame / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }

    /// Reflect-padded frame `t` (unwindowed), centred on sample `t * hop`.
    pub fn frame_samples(&self, samples: &[f64], t: usize) -> Vec<f64> {
        let start = (t * self.hop) as isize - (self.frame / 2) as isize;
        (0..self.frame)
            .map(|k| samples[reflect_index(start + k as isize, samples.len())])
            .collect()
    }

    /// Complex spectrum, `T x n_bins`.
    pub fn spectrum(&self, samples: &[f64]) -> Array2<Complex64> {
        let n_frames = self.n_frames(samples.len());
        let n_bins = self.n_bins();
        let mut out = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame];
        for t in 0..n_frames {
            let frame = self.frame_samples(samples, t);
            for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            for (k, v) in buf[..n_bins].iter().enumerate() {
                out[[t, k]] = *v;
            }
        }
        out
    }

    pub fn magnitude(&self, samples: &[f64]) -> Array2<f64> {
        self.spectrum(samples).mapv(|c| c.norm())
    }

    /// Weighted overlap-add inverse of [`Stft::spectrum`]; returns `length` samples
    /// starting at the first frame centre.
    pub fn inverse(&self, spec: &Array2<Complex64>, length: usize) -> Vec<f64> {
        let n_frames = spec.nrows();
        let n_bins = self.n_bins();
        let padded_len = self.frame + self.hop * n_frames.saturating_sub(1);
        let mut acc = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame];
        let scale = 1.0 / self.frame as f64;
        for t in 0..n_frames {
            for k in 0..n_bins {
                buf[k] = spec[[t, k]];
            }
            // Hermitian extension for a real signal.
            for k in n_bins..self.frame {
                buf[k] = spec[[t, self.frame - k]].conj();
            }
            self.inverse.process(&mut buf);
            let offset = t * self.hop;
            for (k, (b, w)) in buf.iter().zip(&self.window).enumerate() {
                acc[offset + k] += b.re * scale * w;
                norm[offset + k] += w * w;
            }
        }
        let half = self.frame / 2;
        (0..length)
            .map(|i| {
                let j = i + half;
                if j < padded_len && norm[j] > 1e-10 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
