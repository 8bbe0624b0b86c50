use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::stft::Stft;
use super::{mel, FeatureConfig};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Log-mel to waveform via filterbank pseudo-inverse and fast Griffin-Lim
/// (momentum-accelerated phase estimation).
pub struct GriffinLim {
    config: FeatureConfig,
    stft: Stft,
    /// `n_bins x n_mels`
    inverse_filters: Array2<f64>,
    pub iterations: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl GriffinLim {
    pub const DEFAULT_ITERATIONS: usize = 32;

    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let fb = mel::filterbank(
            config.n_mels,
            config.frame,
            config.sample_rate,
            config.fmin,
            config.fmax,
        );
        let (rows, cols) = fb.dim();
        let m = DMatrix::from_row_iterator(rows, cols, fb.iter().copied());
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Config(format!("mel filterbank pseudo-inverse failed: {e}")))?;
        let inverse_filters = Array2::from_shape_fn((cols, rows), |(i, j)| pinv[(i, j)]);
        Ok(Self {
            stft: Stft::new(config.frame, config.hop),
            config,
            inverse_filters,
            iterations: Self::DEFAULT_ITERATIONS,
            momentum: 0.99,
            seed: 0,
        })
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    /// Linear magnitude estimate from a `T x n_mels` log-mel matrix.
    pub fn linear_magnitude(&self, log_mel: &Array2<f64>) -> Array2<f64> {
        log_mel
            .mapv(f64::exp)
            .dot(&self.inverse_filters.t())
            .mapv(|v| v.max(0.0))
    }

    pub fn reconstruct(&self, log_mel: &Array2<f64>) -> Result<AudioClip> {
        if log_mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        if log_mel.ncols() != self.config.n_mels {
            return Err(Error::shape(
                "mel",
                format!("{} columns, expected {}", log_mel.ncols(), self.config.n_mels),
            ));
        }
        let n_frames = log_mel.nrows();
        let length = n_frames.saturating_sub(1) * self.config.hop;
        if n_frames == 0 || length == 0 {
            return AudioClip::new(vec![0.0; length], self.config.sample_rate);
        }
        let magnitude = self.linear_magnitude(log_mel);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spec = magnitude.mapv(|m| {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            Complex64::from_polar(m, phase)
        });
        let mut previous: Option<Array2<Complex64>> = None;
        for _ in 0..self.iterations {
            let signal = self.stft.inverse(&spec, length);
            let rebuilt = self.stft.spectrum(&signal);
            let accelerated = match &previous {
                Some(prev) => &rebuilt + &(prev - &rebuilt).mapv(|c| c * -self.momentum),
                None => rebuilt.clone(),
            };
            previous = Some(rebuilt);
            ndarray::Zip::from(&mut spec)
                .and(&accelerated)
                .and(&magnitude)
                .for_each(|s, a, &m| {
                    let norm = a.norm();
                    *s = if norm > 1e-16 {
                        a * (m / norm)
                    } else {
                        Complex64::new(m, 0.0)
                    };
                });
        }
        let samples = self.stft.inverse(&spec, length);
        AudioClip::new(samples, self.config.sample_rate)
    }
}
