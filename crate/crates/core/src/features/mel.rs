use ndarray::Array2;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of `n_mels` triangular filters: `n_mels + 2` points
/// evenly spaced on the mel scale between `fmin` and `fmax`.
pub fn band_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank, `n_mels x n_bins`, peak weight 1 at each centre.
pub fn filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let edges = band_edges(n_mels, fmin, fmax);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - left) / (centre - left);
        let down = (right - f) / (right - centre);
        up.min(down).max(0.0)
    })
}
