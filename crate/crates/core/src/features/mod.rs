//! Acoustic supervision targets (log-mel, F0, energy, phoneme durations) and the
//! Griffin-Lim waveform reconstruction used in place of a neural vocoder.

mod cache;
mod griffin_lim;
pub mod mel;
pub mod pitch;
pub mod stft;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioClip;
use crate::corpus::AlignmentRecord;
use crate::error::{Error, Result};

pub use cache::{read_features, read_mel, write_features, write_mel, CACHE_VERSION};
pub use griffin_lim::GriffinLim;
use stft::Stft;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub mel_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            frame: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            mel_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame < self.hop {
            return Err(Error::Config(format!(
                "frame size {} is smaller than hop {}",
                self.frame, self.hop
            )));
        }
        if self.hop == 0 || self.n_mels == 0 || self.sample_rate == 0 {
            return Err(Error::Config("hop, n_mels and sample_rate must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel range {}..{} Hz invalid for {} Hz audio",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if !(self.mel_floor > 0.0) {
            return Err(Error::Config("mel_floor must be positive".into()));
        }
        Ok(())
    }

    /// Short stable digest recorded in feature caches.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "sr={};frame={};hop={};n_mels={};fmin={:?};fmax={:?};floor={:?}",
            self.sample_rate, self.frame, self.hop, self.n_mels, self.fmin, self.fmax, self.mel_floor
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hop_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// Per-utterance supervision targets at frame level plus phoneme durations.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    /// `T x n_mels` natural-log mel magnitudes.
    pub mel: Array2<f64>,
    /// Hz, 0 for unvoiced frames.
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<usize>,
}

impl AcousticFeatures {
    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }

    pub fn validate(&self, n_mels: usize) -> Result<()> {
        let t = self.n_frames();
        if self.mel.ncols() != n_mels {
            return Err(Error::shape(
                "mel",
                format!("{} columns, expected {n_mels}", self.mel.ncols()),
            ));
        }
        if self.f0.len() != t || self.energy.len() != t {
            return Err(Error::shape(
                "features",
                format!("f0 {} / energy {} frames vs mel {t}", self.f0.len(), self.energy.len()),
            ));
        }
        let sum: usize = self.durations.iter().sum();
        if sum != t {
            return Err(Error::shape("durations", format!("sum {sum} != {t} frames")));
        }
        if self.f0.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::NonFinite("f0".into()));
        }
        Ok(())
    }

    /// Mean F0 over each phoneme's voiced frames (0 when none are voiced).
    pub fn phoneme_pitch(&self) -> Vec<f64> {
        phoneme_average(&self.f0, &self.durations, true)
    }

    pub fn phoneme_energy(&self) -> Vec<f64> {
        phoneme_average(&self.energy, &self.durations, false)
    }
}

/// Averages a frame-level track over consecutive phoneme spans. With `voiced_only`,
/// zero-valued frames are ignored.
pub fn phoneme_average(track: &[f64], durations: &[usize], voiced_only: bool) -> Vec<f64> {
    let mut start = 0;
    durations
        .iter()
        .map(|&d| {
            let span = &track[start.min(track.len())..(start + d).min(track.len())];
            start += d;
            let (sum, n) = span
                .iter()
                .filter(|&&v| !voiced_only || v > 0.0)
                .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    filters: Array2<f64>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.frame, config.hop);
        let filters = mel::filterbank(
            config.n_mels,
            config.frame,
            config.sample_rate,
            config.fmin,
            config.fmax,
        );
        Ok(Self { config, stft, filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filters
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        if clip.is_empty() {
            return Err(Error::Audio("empty clip".into()));
        }
        if clip.sample_rate != self.config.sample_rate {
            return Err(Error::Audio(format!(
                "clip at {} Hz, extractor configured for {} Hz",
                clip.sample_rate, self.config.sample_rate
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        self.stft.n_frames(n_samples)
    }

    /// Mel filterbank magnitudes before log compression, `T x n_mels`.
    pub fn mel_magnitude(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        self.check_clip(clip)?;
        let mag = self.stft.magnitude(&clip.samples);
        Ok(mag.dot(&self.filters.t()))
    }

    pub fn compute_mel(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let floor = self.config.mel_floor;
        Ok(self.mel_magnitude(clip)?.mapv(|v| v.max(floor).ln()))
    }

    pub fn extract_f0(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        Ok(pitch::track(&clip.samples, clip.sample_rate, &self.stft))
    }

    /// L2 norm of each STFT magnitude column.
    pub fn compute_energy(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        let mag = self.stft.magnitude(&clip.samples);
        Ok(mag.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect())
    }

    pub fn extract(&self, clip: &AudioClip, alignment: &AlignmentRecord) -> Result<AcousticFeatures> {
        self.check_clip(clip)?;
        let spec = self.stft.magnitude(&clip.samples);
        let floor = self.config.mel_floor;
        let mel = spec.dot(&self.filters.t()).mapv(|v| v.max(floor).ln());
        let energy = spec.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let f0 = pitch::track(&clip.samples, clip.sample_rate, &self.stft);
        let durations = durations_from_alignment(alignment, self.config.sample_rate, self.config.hop, mel.nrows())?;
        let features = AcousticFeatures {
            mel,
            f0,
            energy,
            durations,
        };
        features.validate(self.config.n_mels)?;
        Ok(features)
    }
}

pub fn compute_mel(clip: &AudioClip, config: &FeatureConfig) -> Result<Array2<f64>> {
    FeatureExtractor::new(config.clone())?.compute_mel(clip)
}

pub fn extract_f0(clip: &AudioClip, config: &FeatureConfig) -> Result<Vec<f64>> {
    FeatureExtractor::new(config.clone())?.extract_f0(clip)
}

pub fn compute_energy(clip: &AudioClip, config: &FeatureConfig) -> Result<Vec<f64>> {
    FeatureExtractor::new(config.clone())?.compute_energy(clip)
}

/// Converts interval end times to per-phoneme frame counts. Boundaries are rounded
/// half-up to frames and the final boundary is pinned to `n_frames`.
pub fn durations_from_alignment(
    alignment: &AlignmentRecord,
    sample_rate: u32,
    hop: usize,
    n_frames: usize,
) -> Result<Vec<usize>> {
    alignment.validate()?;
    let n = alignment.entries.len();
    if n == 0 {
        return Err(Error::Alignment {
            row: 0,
            message: "empty alignment".into(),
        });
    }
    let frames_per_s = sample_rate as f64 / hop as f64;
    let mut prev: i64 = 0;
    let mut out = Vec::with_capacity(n);
    for (row, e) in alignment.entries.iter().enumerate() {
        let boundary = if row + 1 == n {
            n_frames as i64
        } else {
            (e.end_s * frames_per_s + 0.5).floor() as i64
        };
        let d = boundary - prev;
        if d < 0 {
            return Err(Error::Alignment {
                row,
                message: format!("boundary frame {boundary} precedes previous boundary {prev}"),
            });
        }
        out.push(d as usize);
        prev = boundary;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_alignment, AlignmentEntry};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, amp: f64, n: usize) -> AudioClip {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin())
            .collect();
        AudioClip::new(samples, 22050).unwrap()
    }

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(FeatureConfig::default()).unwrap()
    }

    #[test]
    fn frame_count_for_one_second() {
        let mel = extractor().compute_mel(&sine(440.0, 0.5, 22050)).unwrap();
        assert_eq!(mel.dim(), (22050 / 256 + 1, 80));
        assert_eq!(mel.nrows(), 87);
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip::new(vec![0.0; 5000], 22050).unwrap();
        let ex = extractor();
        let mel = ex.compute_mel(&clip).unwrap();
        let floor = 1e-5f64.ln();
        assert!(mel.iter().all(|&v| v == floor));
        assert!(ex.extract_f0(&clip).unwrap().iter().all(|&f| f == 0.0));
        assert!(ex.compute_energy(&clip).unwrap().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_empty_clip_and_bad_config() {
        let clip = AudioClip::new(vec![], 22050).unwrap();
        assert!(extractor().compute_mel(&clip).is_err());
        let cfg = FeatureConfig {
            frame: 128,
            hop: 256,
            ..FeatureConfig::default()
        };
        assert!(matches!(FeatureExtractor::new(cfg), Err(Error::Config(_))));
    }

    /// Analytic triangle weights at `hz`, independent of FFT bin placement.
    fn strongest_band_at(hz: f64) -> usize {
        let edges = mel::band_edges(80, 0.0, 8000.0);
        (0..80)
            .map(|m| {
                let up = (hz - edges[m]) / (edges[m + 1] - edges[m]);
                let down = (edges[m + 2] - hz) / (edges[m + 2] - edges[m + 1]);
                (m, up.min(down).max(0.0))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn sine_peaks_in_its_mel_band() {
        let expected = strongest_band_at(440.0);
        let edges = mel::band_edges(80, 0.0, 8000.0);
        assert!(edges[expected] < 440.0 && 440.0 < edges[expected + 2]);
        let mel = extractor().compute_mel(&sine(440.0, 0.5, 22050)).unwrap();
        for t in 2..mel.nrows() - 2 {
            let row = mel.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn f0_of_pure_tone() {
        let f0 = extractor().extract_f0(&sine(220.0, 0.5, 22050)).unwrap();
        assert_eq!(f0.len(), 87);
        for &f in &f0[2..f0.len() - 2] {
            assert!((f - 220.0).abs() < 5.0, "{f}");
        }
    }

    #[test]
    fn f0_of_white_noise_is_mostly_unvoiced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples = (0..22050).map(|_| rng.random_range(-0.5..0.5)).collect();
        let f0 = extractor()
            .extract_f0(&AudioClip::new(samples, 22050).unwrap())
            .unwrap();
        let unvoiced = f0.iter().filter(|&&f| f == 0.0).count() as f64 / f0.len() as f64;
        assert!(unvoiced >= 0.8, "unvoiced fraction {unvoiced}");
    }

    #[test]
    fn energy_and_mel_are_linear_in_amplitude() {
        let ex = extractor();
        let base = sine(330.0, 0.25, 8000);
        let double = base.scaled(2.0);
        let e1 = ex.compute_energy(&base).unwrap();
        let e2 = ex.compute_energy(&double).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((b / a - 2.0).abs() < 1e-6);
        }
        let m1 = ex.mel_magnitude(&base).unwrap();
        let m2 = ex.mel_magnitude(&double).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((b - 2.0 * a).abs() <= 1e-9 * b.abs().max(1e-12));
        }
        assert_eq!(ex.compute_mel(&base).unwrap(), ex.compute_mel(&base).unwrap());
    }

    #[test]
    fn durations_example() {
        let rec = parse_alignment("a\t0.0\t0.10\nb\t0.10\t0.25\n").unwrap();
        assert_eq!(durations_from_alignment(&rec, 22050, 256, 22).unwrap(), vec![9, 13]);
        let single = parse_alignment("sil\t0.0\t1.0\n").unwrap();
        assert_eq!(durations_from_alignment(&single, 22050, 256, 87).unwrap(), vec![87]);
        // An interior boundary past the final frame cannot be honoured.
        let late = parse_alignment("a\t0.0\t0.5\nb\t0.5\t0.6\n").unwrap();
        assert!(durations_from_alignment(&late, 22050, 256, 20).is_err());
    }

    #[test]
    fn extract_keeps_lengths_consistent() {
        let clip = sine(200.0, 0.4, 11025);
        let rec = parse_alignment("a\t0.0\t0.2\nb\t0.2\t0.5\n").unwrap();
        let f = extractor().extract(&clip, &rec).unwrap();
        assert_eq!(f.f0.len(), f.n_frames());
        assert_eq!(f.energy.len(), f.n_frames());
        assert_eq!(f.durations.iter().sum::<usize>(), f.n_frames());
        let p = f.phoneme_pitch();
        assert!(p.iter().all(|&hz| (hz - 200.0).abs() < 10.0), "{p:?}");
    }

    #[test]
    fn phoneme_average_skips_unvoiced() {
        let avg = phoneme_average(&[0.0, 100.0, 200.0, 0.0, 0.0], &[3, 2, 0], true);
        assert_eq!(avg, vec![150.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn durations_are_non_negative_and_sum_to_t(
            widths in proptest::collection::vec(1u32..200_000, 1..30),
            extra in 0usize..3,
        ) {
            let mut t = 0u64;
            let entries: Vec<AlignmentEntry> = widths.iter().enumerate().map(|(i, &w)| {
                let start = t as f64 / 1e6;
                t += w as u64;
                AlignmentEntry { phoneme: format!("p{i}"), start_s: start, end_s: t as f64 / 1e6 }
            }).collect();
            let total_s = t as f64 / 1e6;
            let rec = AlignmentRecord::new(entries).unwrap();
            let n_frames = (total_s * 22050.0 / 256.0).round() as usize + extra;
            let d = durations_from_alignment(&rec, 22050, 256, n_frames).unwrap();
            prop_assert_eq!(d.len(), widths.len());
            prop_assert_eq!(d.iter().sum::<usize>(), n_frames);
        }
    }
}
