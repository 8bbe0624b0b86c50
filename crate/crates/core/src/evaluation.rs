//! Classifier accuracy with a confusion matrix, and the paired-label
//! controllability probe over predicted durations and pitch.

use std::fmt::Write as _;

use crate::corpus::EmotionPolarity;
use crate::emotion::argmax_rows;
use crate::error::{Error, Result};
use crate::model::{AcousticModel, Batch, Example};
use crate::nn::ParamStore;

const K: usize = EmotionPolarity::COUNT;
const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95% for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z95 * Z95;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub interval: (f64, f64),
    /// `confusion[truth][predicted]`.
    pub confusion: [[usize; K]; K],
}

impl ClassifierReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Contract("classifier accuracy needs a non-empty test set".into()));
        }
        if predicted.len() != truth.len() {
            return Err(Error::shape(
                "predictions",
                format!("{} for {} labels", predicted.len(), truth.len()),
            ));
        }
        let mut confusion = [[0; K]; K];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= K || t >= K {
                return Err(Error::InvalidClassIndex(p.max(t)));
            }
            confusion[t][p] += 1;
        }
        let correct = (0..K).map(|c| confusion[c][c]).sum();
        Ok(Self {
            total: truth.len(),
            correct,
            accuracy: correct as f64 / truth.len() as f64,
            interval: wilson_interval(correct, truth.len()),
            confusion,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "total\t{}\ncorrect\t{}\naccuracy\t{:.6}\nci95_low\t{:.6}\nci95_high\t{:.6}\n",
            self.total, self.correct, self.accuracy, self.interval.0, self.interval.1
        )
    }

    /// Rows are true polarities, columns predicted ones.
    pub fn confusion_tsv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for p in EmotionPolarity::ALL {
            let _ = write!(s, "\t{p}");
        }
        s.push('\n');
        for (t, row) in EmotionPolarity::ALL.iter().zip(&self.confusion) {
            let _ = write!(s, "{t}");
            for c in row {
                let _ = write!(s, "\t{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Argmax-logit accuracy of the model's classifier over `examples`.
pub fn classifier_accuracy(
    model: &AcousticModel,
    params: &ParamStore,
    examples: &[Example],
    batch_size: usize,
) -> Result<ClassifierReport> {
    if examples.is_empty() {
        return Err(Error::Contract("classifier accuracy needs a non-empty test set".into()));
    }
    let mut predicted = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.phonemes.as_slice()).collect();
        let batch = Batch::new(
            &seqs,
            chunk.iter().map(|e| e.speaker).collect(),
            chunk.iter().map(|e| e.label).collect(),
            None,
        )?;
        predicted.extend(argmax_rows(&model.emotion_logits(params, &batch)?));
    }
    let truth: Vec<usize> = examples.iter().map(|e| e.label).collect();
    ClassifierReport::from_predictions(&predicted, &truth)
}

/// Least-squares slope (Hz per frame) of the voiced frames of a phoneme
/// pitch plan expanded by its durations; 0 when fewer than two frames are voiced.
pub fn pitch_slope(pitch_hz: &[f64], durations: &[usize]) -> f64 {
    let mut frame = 0usize;
    let mut pts = Vec::new();
    for (&hz, &d) in pitch_hz.iter().zip(durations) {
        for _ in 0..d {
            if hz > 0.0 {
                pts.push((frame as f64, hz));
            }
            frame += 1;
        }
    }
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub text_index: usize,
    pub polarity: EmotionPolarity,
    pub total_frames: usize,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlProbeReport {
    pub labels: (EmotionPolarity, EmotionPolarity),
    pub rows: Vec<ProbeRow>,
    /// Per text: frames(first) - frames(second), slope(first) - slope(second).
    pub paired: Vec<(f64, f64)>,
}

impl ControlProbeReport {
    fn column(&self, p: EmotionPolarity, f: impl Fn(&ProbeRow) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.polarity == p).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_frames(&self, p: EmotionPolarity) -> f64 {
        self.column(p, |r| r.total_frames as f64)
    }

    pub fn mean_slope(&self, p: EmotionPolarity) -> f64 {
        self.column(p, |r| r.slope)
    }

    /// Share of texts where the first label is strictly shorter.
    pub fn shorter_fraction(&self) -> f64 {
        self.paired.iter().filter(|d| d.0 < 0.0).count() as f64 / self.paired.len().max(1) as f64
    }

    /// Share of texts where the first label has the strictly steeper rise.
    pub fn steeper_fraction(&self) -> f64 {
        self.paired.iter().filter(|d| d.1 > 0.0).count() as f64 / self.paired.len().max(1) as f64
    }

    pub fn rows_tsv(&self) -> String {
        let mut s = String::from("text\tpolarity\ttotal_frames\tpitch_slope\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}",
                r.text_index, r.polarity, r.total_frames, r.slope
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let (a, b) = self.labels;
        let mut s = String::new();
        for p in [a, b] {
            let _ = writeln!(s, "mean_frames[{p}]\t{:.4}", self.mean_frames(p));
            let _ = writeln!(s, "mean_slope[{p}]\t{:.6}", self.mean_slope(p));
        }
        let _ = writeln!(s, "texts\t{}", self.paired.len());
        let _ = writeln!(s, "shorter_fraction\t{:.4}", self.shorter_fraction());
        let _ = writeln!(s, "steeper_fraction\t{:.4}", self.steeper_fraction());
        s
    }
}

/// Synthesises every text once per label and compares total predicted frames
/// and pitch-plan slope, pairwise per text.
pub fn probe_controllability(
    model: &AcousticModel,
    params: &ParamStore,
    texts: &[Vec<usize>],
    speaker: usize,
    labels: (EmotionPolarity, EmotionPolarity),
) -> Result<ControlProbeReport> {
    if texts.is_empty() {
        return Err(Error::Contract("probe needs at least one text".into()));
    }
    let mut rows = Vec::with_capacity(2 * texts.len());
    let mut paired = Vec::with_capacity(texts.len());
    for (i, phonemes) in texts.iter().enumerate() {
        let mut pair = Vec::with_capacity(2);
        for p in [labels.0, labels.1] {
            let inf = model.synthesize(params, phonemes, speaker, Some(p))?;
            let row = ProbeRow {
                text_index: i,
                polarity: p,
                total_frames: inf.durations.iter().sum(),
                slope: pitch_slope(&inf.pitch_hz, &inf.durations),
            };
            if !row.slope.is_finite() {
                return Err(Error::NonFinite(format!("pitch slope for text {i}")));
            }
            pair.push(row.clone());
            rows.push(row);
        }
        paired.push((
            pair[0].total_frames as f64 - pair[1].total_frames as f64,
            pair[0].slope - pair[1].slope,
        ));
    }
    Ok(ControlProbeReport { labels, rows, paired })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::VarianceStats;

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = vec![0, 1, 2, 3, 4, 4, 4, 2];
        let r = ClassifierReport::from_predictions(&truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for c in 0..5 {
            let constant = vec![c; truth.len()];
            let r = ClassifierReport::from_predictions(&constant, &truth).unwrap();
            let freq = truth.iter().filter(|&&t| t == c).count() as f64 / truth.len() as f64;
            assert_eq!(r.accuracy, freq);
            for (t, row) in r.confusion.iter().enumerate() {
                assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&x| x == t).count());
            }
        }
        assert!(ClassifierReport::from_predictions(&[], &[]).is_err());
        assert!(r.confusion_tsv().lines().count() == 6);
    }

    #[test]
    fn wilson_interval_brackets_estimate() {
        let (lo, hi) = wilson_interval(20, 100);
        assert!(lo < 0.2 && 0.2 < hi);
        // Reference values for 20/100.
        assert!((lo - 0.1333).abs() < 1e-3 && (hi - 0.2888).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
    }

    #[test]
    fn slope_of_expanded_plan() {
        // Frames 0..1 at 100 Hz, 2..3 unvoiced, 4 at 140 Hz: points (0,100),(1,100),(4,140).
        let s = pitch_slope(&[100.0, 0.0, 140.0], &[2, 2, 1]);
        let (mx, my) = (5.0 / 3.0, 340.0 / 3.0);
        let sxy = (0.0 - mx) * (100.0 - my) + (1.0 - mx) * (100.0 - my) + (4.0 - mx) * (140.0 - my);
        let sxx = (0.0f64 - mx).powi(2) + (1.0f64 - mx).powi(2) + (4.0f64 - mx).powi(2);
        assert!((s - sxy / sxx).abs() < 1e-12);
        assert_eq!(pitch_slope(&[0.0, 120.0], &[3, 1]), 0.0);
    }

    #[test]
    fn identical_labels_give_zero_differences() {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            conv_kernels: [3, 1],
            conv_filter: 8,
            predictor_filter: 8,
            n_mels: 4,
            n_pitch_bins: 8,
            n_energy_bins: 8,
            phoneme_vocab_size: 6,
            classifier_channels: [2, 2, 2],
            ..ModelConfig::default()
        };
        let (model, params) = AcousticModel::new(config, VarianceStats::default(), 3).unwrap();
        let texts = vec![vec![1, 2, 3], vec![4, 5]];
        let p = EmotionPolarity::StrongPositive;
        let r = probe_controllability(&model, &params, &texts, 0, (p, p)).unwrap();
        assert!(r.paired.iter().all(|&(d, s)| d == 0.0 && s == 0.0));
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r, probe_controllability(&model, &params, &texts, 0, (p, p)).unwrap());
    }
}
