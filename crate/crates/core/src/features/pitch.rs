use super::stft::Stft;

pub const F0_MIN_HZ: f64 = 65.0;
pub const F0_MAX_HZ: f64 = 1000.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Earliest peak within this fraction of the best correlation wins (octave-error guard).
const PEAK_RATIO: f64 = 0.9;

/// Normalised autocorrelation F0 tracker. One value per STFT frame; 0 marks unvoiced.
pub fn track(samples: &[f64], sample_rate: u32, stft: &Stft) -> Vec<f64> {
    let sr = sample_rate as f64;
    let lag_min = ((sr / F0_MAX_HZ).floor() as usize).max(1);
    let lag_max = ((sr / F0_MIN_HZ).ceil() as usize).min(stft.frame.saturating_sub(2));
    let n_frames = stft.n_frames(samples.len());
    if samples.is_empty() || lag_max <= lag_min + 1 {
        return vec![0.0; n_frames];
    }
    let mut corr = vec![0.0; lag_max + 2];
    (0..n_frames)
        .map(|t| {
            let x = stft.frame_samples(samples, t);
            frame_f0(&x, sr, lag_min, lag_max, &mut corr)
        })
        .collect()
}

fn frame_f0(x: &[f64], sr: f64, lag_min: usize, lag_max: usize, corr: &mut [f64]) -> f64 {
    let n = x.len();
    // Prefix sums of squares give the energy of any window in O(1).
    let mut sq = vec![0.0; n + 1];
    for i in 0..n {
        sq[i + 1] = sq[i] + x[i] * x[i];
    }
    if sq[n] < 1e-12 {
        return 0.0;
    }
    let hi = (lag_max + 1).min(n - 1);
    for lag in (lag_min - 1)..=hi {
        let m = n - lag;
        let dot: f64 = x[..m].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
        let e1 = sq[m];
        let e2 = sq[n] - sq[lag];
        let denom = (e1 * e2).sqrt();
        corr[lag] = if denom > 1e-12 { dot / denom } else { 0.0 };
    }
    let is_peak = |lag: usize| corr[lag] >= corr[lag - 1] && corr[lag] >= corr[lag + 1];
    let best = (lag_min..=lag_max.min(hi - 1))
        .filter(|&l| is_peak(l))
        .map(|l| corr[l])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best >= VOICING_THRESHOLD) {
        return 0.0;
    }
    let lag = (lag_min..=lag_max.min(hi - 1))
        .find(|&l| is_peak(l) && corr[l] >= PEAK_RATIO * best)
        .expect("best peak exists");
    let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
    let curvature = a - 2.0 * b + c;
    let shift = if curvature.abs() > 1e-12 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    sr / (lag as f64 + shift)
}
