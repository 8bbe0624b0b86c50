//! Non-autoregressive acoustic model: phoneme encoder, emotion conditioning,
//! variance adaptor, length regulator and mel decoder.

mod layers;

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{ClassifierInput, ModelConfig};
use crate::corpus::EmotionPolarity;
use crate::emotion::{predict_or_force, EmotionClassifier, EmotionController};
use crate::error::{Error, Result};
use crate::features::pitch::{F0_MAX_HZ, F0_MIN_HZ};
use crate::nn::{sinusoid_table, Ctx, Embedding, Init, Linear, ParamStore};

pub use layers::{length_regulate, FftBlock, SeqLayout, VariancePredictor};

/// Corpus-level normalisation constants for the pitch and energy targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub pitch_log_mean: f64,
    pub pitch_log_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub energy_min: f64,
    pub energy_max: f64,
}

impl Default for VarianceStats {
    fn default() -> Self {
        Self {
            pitch_log_mean: 150f64.ln(),
            pitch_log_std: 0.25,
            energy_mean: 0.0,
            energy_std: 1.0,
            energy_min: 0.0,
            energy_max: 1.0,
        }
    }
}

const MIN_STD: f64 = 1e-3;

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt().max(MIN_STD)))
}

impl VarianceStats {
    /// Statistics over per-phoneme averages; unvoiced phonemes (pitch 0) are
    /// left out of the pitch moments.
    pub fn from_phonemes(pitch_hz: &[f64], energy: &[f64]) -> Self {
        let defaults = Self::default();
        let log_pitch: Vec<f64> = pitch_hz.iter().filter(|&&p| p > 0.0).map(|p| p.ln()).collect();
        let (pitch_log_mean, pitch_log_std) =
            mean_std(&log_pitch).unwrap_or((defaults.pitch_log_mean, defaults.pitch_log_std));
        let (energy_mean, energy_std) = mean_std(energy).unwrap_or((defaults.energy_mean, defaults.energy_std));
        let energy_min = energy.iter().copied().fold(f64::INFINITY, f64::min);
        let energy_max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (energy_min, energy_max) = if energy_min.is_finite() && energy_max > energy_min {
            (energy_min, energy_max)
        } else {
            (defaults.energy_min, defaults.energy_max)
        };
        Self {
            pitch_log_mean,
            pitch_log_std,
            energy_mean,
            energy_std,
            energy_min,
            energy_max,
        }
    }

    /// Normalised log-F0. Unvoiced phonemes map to the value of half the
    /// search floor, below every voiced target.
    pub fn normalize_pitch(&self, hz: f64) -> f64 {
        let hz = if hz > 0.0 { hz } else { F0_MIN_HZ / 2.0 };
        (hz.ln() - self.pitch_log_mean) / self.pitch_log_std
    }

    /// Hertz from a normalised prediction; anything under the search floor is unvoiced (0).
    pub fn denormalize_pitch(&self, z: f64) -> f64 {
        let hz = (z * self.pitch_log_std + self.pitch_log_mean).exp();
        if hz < F0_MIN_HZ {
            0.0
        } else {
            hz
        }
    }

    pub fn normalize_energy(&self, e: f64) -> f64 {
        (e - self.energy_mean) / self.energy_std
    }

    pub fn denormalize_energy(&self, z: f64) -> f64 {
        z * self.energy_std + self.energy_mean
    }

    /// Bucket 0 is unvoiced; voiced pitch is quantised on a log scale over the search range.
    pub fn pitch_bucket(&self, hz: f64, n_bins: usize) -> usize {
        if !(hz >= F0_MIN_HZ) {
            return 0;
        }
        let frac = (hz.ln() - F0_MIN_HZ.ln()) / (F0_MAX_HZ.ln() - F0_MIN_HZ.ln());
        (1 + (frac * (n_bins - 1) as f64).floor() as usize).clamp(1, n_bins - 1)
    }

    /// Linear buckets between the corpus minimum and maximum.
    pub fn energy_bucket(&self, e: f64, n_bins: usize) -> usize {
        let frac = (e - self.energy_min) / (self.energy_max - self.energy_min);
        if !frac.is_finite() || frac <= 0.0 {
            return 0;
        }
        ((frac * n_bins as f64).floor() as usize).min(n_bins - 1)
    }
}

/// Phoneme-level model inputs for a padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub layout: SeqLayout,
    /// Row-major `batch x max_len` phoneme ids; padding rows hold 0.
    pub phonemes: Vec<usize>,
    pub speakers: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(
        sequences: &[&[usize]],
        speakers: Vec<usize>,
        labels: Vec<usize>,
        max_len: Option<usize>,
    ) -> Result<Self> {
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        let max_len = max_len.unwrap_or_else(|| lengths.iter().copied().max().unwrap_or(0));
        let layout = SeqLayout::new(lengths, max_len)?;
        if speakers.len() != sequences.len() || labels.len() != sequences.len() {
            return Err(Error::shape(
                "batch",
                "speakers and labels must have one entry per sequence",
            ));
        }
        let mut phonemes = vec![0; layout.rows()];
        for (b, seq) in sequences.iter().enumerate() {
            phonemes[b * max_len..b * max_len + seq.len()].copy_from_slice(seq);
        }
        Ok(Self {
            layout,
            phonemes,
            speakers,
            labels,
        })
    }
}

/// Ground truth for one utterance at phoneme and frame level.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub label: usize,
    pub durations: Vec<usize>,
    /// Per-phoneme average F0 in Hz, 0 for unvoiced.
    pub pitch_hz: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: Array2<f64>,
}

/// Padded targets aligned with a [`Batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub durations: Vec<usize>,
    pub pitch_hz: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy_raw: Vec<f64>,
    pub energy: Vec<f64>,
    pub frames: SeqLayout,
    /// `batch * max_frames x n_mels`; padding rows are zero.
    pub mel: Array2<f64>,
}

/// Pads a list of examples into model inputs and targets. `pad_to` forces
/// the padded phoneme and frame lengths.
pub fn collate(
    examples: &[&Example],
    stats: &VarianceStats,
    pad_to: Option<(usize, usize)>,
) -> Result<(Batch, Targets)> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.phonemes.as_slice()).collect();
    let batch = Batch::new(
        &seqs,
        examples.iter().map(|e| e.speaker).collect(),
        examples.iter().map(|e| e.label).collect(),
        pad_to.map(|p| p.0),
    )?;
    let frame_lengths: Vec<usize> = examples.iter().map(|e| e.mel.nrows()).collect();
    let max_frames = pad_to.map_or_else(|| frame_lengths.iter().copied().max().unwrap_or(0), |p| p.1);
    let frames = SeqLayout::new(frame_lengths, max_frames)?;
    let n_mels = examples.first().map_or(0, |e| e.mel.ncols());
    let rows = batch.layout.rows();
    let mut t = Targets {
        durations: vec![0; rows],
        pitch_hz: vec![0.0; rows],
        pitch: vec![0.0; rows],
        energy_raw: vec![0.0; rows],
        energy: vec![0.0; rows],
        frames,
        mel: Array2::zeros((examples.len() * max_frames, n_mels)),
    };
    for (b, e) in examples.iter().enumerate() {
        let l = e.phonemes.len();
        if e.durations.len() != l || e.pitch_hz.len() != l || e.energy.len() != l {
            return Err(Error::shape(
                "example",
                format!("item {b}: per-phoneme targets disagree with {l} phonemes"),
            ));
        }
        let total: usize = e.durations.iter().sum();
        if total != e.mel.nrows() {
            return Err(Error::shape(
                "example",
                format!("item {b}: durations sum to {total}, mel has {} frames", e.mel.nrows()),
            ));
        }
        if e.mel.ncols() != n_mels {
            return Err(Error::shape(
                "mel",
                format!("item {b} has {} bands, expected {n_mels}", e.mel.ncols()),
            ));
        }
        for p in 0..l {
            let r = batch.layout.row(b, p);
            t.durations[r] = e.durations[p];
            t.pitch_hz[r] = e.pitch_hz[p];
            t.pitch[r] = stats.normalize_pitch(e.pitch_hz[p]);
            t.energy_raw[r] = e.energy[p];
            t.energy[r] = stats.normalize_energy(e.energy[p]);
        }
        let start = b * max_frames;
        t.mel
            .slice_mut(ndarray::s![start..start + e.mel.nrows(), ..])
            .assign(&e.mel);
    }
    Ok((batch, t))
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub mel: Var,
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Option<Var>,
    pub emotion_logits: Var,
    /// Labels the controller was conditioned on.
    pub labels: Vec<usize>,
    pub durations: Vec<usize>,
    pub frames: SeqLayout,
    /// Pitch in Hz used for the pitch embedding, per phoneme row.
    pub pitch_hz: Vec<f64>,
}

/// Inference-time overrides.
#[derive(Clone, Debug, Default)]
pub struct InferenceControl {
    /// Per-sequence forced polarity; `None` defers to the classifier.
    pub polarity: Vec<Option<EmotionPolarity>>,
}

/// Result of synthesising one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Class index the controller was conditioned on.
    pub label: usize,
    pub logits: Vec<f64>,
    pub durations: Vec<usize>,
    /// Predicted per-phoneme pitch in Hz, 0 where unvoiced.
    pub pitch_hz: Vec<f64>,
    /// `frames x n_mels` log-mel.
    pub mel: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub stats: VarianceStats,
    pub phoneme_embedding: Embedding,
    pub encoder: Vec<FftBlock>,
    pub classifier: EmotionClassifier,
    pub controller: EmotionController,
    pub duration_predictor: VariancePredictor,
    pub pitch_predictor: VariancePredictor,
    pub pitch_embedding: Embedding,
    pub energy_predictor: Option<VariancePredictor>,
    pub energy_embedding: Option<Embedding>,
    pub speaker_embedding: Option<Embedding>,
    pub decoder: Vec<FftBlock>,
    pub mel_head: Linear,
}

/// `max(1, round(exp(p) - 1))` for a log-domain duration prediction.
pub fn duration_from_log(p: f64) -> usize {
    let d = (p.exp() - 1.0).round();
    if d.is_finite() && d >= 1.0 {
        d as usize
    } else {
        1
    }
}

impl AcousticModel {
    pub fn new(config: ModelConfig, stats: VarianceStats, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let c = &config;
        let d = c.d_model;
        let block =
            |init: &mut Init, name: String| FftBlock::new(init, &name, d, c.n_heads, c.conv_filter, c.conv_kernels);
        let predictor = |init: &mut Init, name: &str| {
            VariancePredictor::new(
                init,
                name,
                d,
                c.predictor_filter,
                c.predictor_kernel,
                c.predictor_dropout,
            )
        };
        let phoneme_embedding = Embedding::new(&mut init, "phoneme_embedding", c.phoneme_vocab_size, d);
        let encoder = (0..c.encoder_layers)
            .map(|i| block(&mut init, format!("encoder.{i}")))
            .collect();
        let classifier = EmotionClassifier::new(&mut init, c.classifier_channels);
        let controller = EmotionController::new(&mut init, d);
        let duration_predictor = predictor(&mut init, "duration_predictor");
        let pitch_predictor = predictor(&mut init, "pitch_predictor");
        let pitch_embedding = Embedding::new(&mut init, "pitch_embedding", c.n_pitch_bins, d);
        let (energy_predictor, energy_embedding) = if c.use_energy {
            (
                Some(predictor(&mut init, "energy_predictor")),
                Some(Embedding::new(&mut init, "energy_embedding", c.n_energy_bins, d)),
            )
        } else {
            (None, None)
        };
        let speaker_embedding = c
            .use_speaker_embedding
            .then(|| Embedding::new(&mut init, "speaker_embedding", c.n_speakers, d));
        let decoder = (0..c.decoder_layers)
            .map(|i| block(&mut init, format!("decoder.{i}")))
            .collect();
        let mel_head = Linear::new(&mut init, "mel_head", d, c.n_mels);
        let model = Self {
            config,
            stats,
            phoneme_embedding,
            encoder,
            classifier,
            controller,
            duration_predictor,
            pitch_predictor,
            pitch_embedding,
            energy_predictor,
            energy_embedding,
            speaker_embedding,
            decoder,
            mel_head,
        };
        Ok((model, store))
    }

    fn positions(&self, ctx: &Ctx, layout: &SeqLayout) -> Var {
        let table = sinusoid_table(layout.max_len, self.config.d_model);
        let pe = Array2::from_shape_fn((layout.rows(), self.config.d_model), |(r, j)| {
            let (b, p) = (r / layout.max_len.max(1), r % layout.max_len.max(1));
            if p < layout.lengths[b] {
                table[[p, j]]
            } else {
                0.0
            }
        });
        ctx.tape.constant(pe)
    }

    /// Phoneme embeddings plus positions, `rows x d_model`.
    pub fn embed(&self, ctx: &Ctx, batch: &Batch) -> Result<Var> {
        let vocab = self.config.phoneme_vocab_size;
        let mut ids = Vec::with_capacity(batch.layout.rows());
        for (r, &id) in batch.phonemes.iter().enumerate() {
            let valid = (r % batch.layout.max_len) < batch.layout.lengths[r / batch.layout.max_len];
            if valid && id >= vocab {
                return Err(Error::OutOfVocabulary { id, vocab });
            }
            ids.push(valid.then_some(id));
        }
        let x = self.phoneme_embedding.forward(ctx, Rc::new(ids));
        Ok(ctx.tape.add(x, self.positions(ctx, &batch.layout)))
    }

    pub fn encode(&self, ctx: &Ctx, embedded: Var, layout: &SeqLayout) -> Result<Var> {
        let mut x = embedded;
        for block in &self.encoder {
            x = block.forward(ctx, x, layout)?;
        }
        Ok(x)
    }

    fn classify(&self, ctx: &Ctx, embedded: Var, encoded: Var, layout: &SeqLayout) -> Result<Var> {
        let source = match self.config.classifier_input {
            ClassifierInput::Encoder => encoded,
            ClassifierInput::Embedding => embedded,
        };
        let source = if self.config.classifier_stop_gradient {
            ctx.tape.detach(source)
        } else {
            source
        };
        self.classifier.forward(ctx, source, layout)
    }

    fn check_speakers(&self, batch: &Batch) -> Result<()> {
        if let Some(&s) = batch.speakers.iter().find(|&&s| s >= self.config.n_speakers) {
            return Err(Error::UnknownSpeaker(format!(
                "speaker index {s} >= {}",
                self.config.n_speakers
            )));
        }
        Ok(())
    }

    /// Decoder over the expanded sequence, `frames x n_mels`.
    pub fn decode(&self, ctx: &Ctx, expanded: Var, frames: &SeqLayout, speakers: &[usize]) -> Result<Var> {
        let t = &ctx.tape;
        let mut y = t.add(expanded, self.positions(ctx, frames));
        if let Some(emb) = &self.speaker_embedding {
            let ids: Vec<Option<usize>> = (0..frames.rows())
                .map(|r| {
                    let (b, p) = (r / frames.max_len, r % frames.max_len);
                    (p < frames.lengths[b]).then_some(speakers[b])
                })
                .collect();
            y = t.add(y, emb.forward(ctx, Rc::new(ids)));
        }
        for block in &self.decoder {
            y = block.forward(ctx, y, frames)?;
        }
        Ok(frames.mask(t, self.mel_head.forward(ctx, y)))
    }

    fn bucket_ids(layout: &SeqLayout, values: &[f64], bucket: impl Fn(f64) -> usize) -> Rc<Vec<Option<usize>>> {
        Rc::new(
            values
                .iter()
                .enumerate()
                .map(|(r, &v)| ((r % layout.max_len) < layout.lengths[r / layout.max_len]).then(|| bucket(v)))
                .collect(),
        )
    }

    fn run(
        &self,
        ctx: &Ctx,
        batch: &Batch,
        targets: Option<&Targets>,
        control: Option<&InferenceControl>,
    ) -> Result<ForwardOutput> {
        let layout = &batch.layout;
        if batch.labels.len() != layout.batch() {
            return Err(Error::shape("labels", "one label per sequence"));
        }
        self.check_speakers(batch)?;
        let t = &ctx.tape;
        let embedded = self.embed(ctx, batch)?;
        let encoded = self.encode(ctx, embedded, layout)?;
        let emotion_logits = self.classify(ctx, embedded, encoded, layout)?;
        let labels = match targets {
            Some(_) => batch.labels.clone(),
            None => {
                let forced = control.map_or_else(|| vec![None; layout.batch()], |c| c.polarity.clone());
                predict_or_force(&t.value(emotion_logits), &forced)?
            }
        };
        let emotion = self.controller.forward(ctx, encoded, layout, &labels)?;
        let x = t.add(encoded, emotion);

        let log_duration = self.duration_predictor.forward(ctx, x, layout)?;
        let pitch = self.pitch_predictor.forward(ctx, x, layout)?;
        let pitch_hz = match targets {
            Some(tg) => tg.pitch_hz.clone(),
            None => t
                .value(pitch)
                .iter()
                .map(|&z| self.stats.denormalize_pitch(z))
                .collect(),
        };
        let n_pitch = self.config.n_pitch_bins;
        let pitch_ids = Self::bucket_ids(layout, &pitch_hz, |hz| self.stats.pitch_bucket(hz, n_pitch));
        let mut x = t.add(x, self.pitch_embedding.forward(ctx, pitch_ids));

        let mut energy = None;
        if let (Some(pred), Some(emb)) = (&self.energy_predictor, &self.energy_embedding) {
            let e = pred.forward(ctx, x, layout)?;
            let raw = match targets {
                Some(tg) => tg.energy_raw.clone(),
                None => t.value(e).iter().map(|&z| self.stats.denormalize_energy(z)).collect(),
            };
            let n_energy = self.config.n_energy_bins;
            let ids = Self::bucket_ids(layout, &raw, |v| self.stats.energy_bucket(v, n_energy));
            x = t.add(x, emb.forward(ctx, ids));
            energy = Some(e);
        }

        let durations = match targets {
            Some(tg) => tg.durations.clone(),
            None => {
                let p = t.value(log_duration);
                (0..layout.rows())
                    .map(|r| {
                        let valid = (r % layout.max_len) < layout.lengths[r / layout.max_len];
                        if valid {
                            duration_from_log(p[[r, 0]])
                        } else {
                            0
                        }
                    })
                    .collect()
            }
        };
        let (expanded, mut frames) = length_regulate(t, x, layout, &durations)?;
        let mut expanded = expanded;
        if let Some(tg) = targets {
            if frames.lengths != tg.frames.lengths {
                return Err(Error::shape(
                    "durations",
                    format!(
                        "target durations expand to {:?}, mel targets have {:?}",
                        frames.lengths, tg.frames.lengths
                    ),
                ));
            }
            if tg.frames.max_len > frames.max_len {
                let index: Vec<Option<usize>> = (0..tg.frames.rows())
                    .map(|r| {
                        let (b, p) = (r / tg.frames.max_len, r % tg.frames.max_len);
                        (p < frames.lengths[b]).then(|| frames.row(b, p))
                    })
                    .collect();
                expanded = t.gather_rows(expanded, Rc::new(index));
                frames = tg.frames.clone();
            }
        }
        let mel = self.decode(ctx, expanded, &frames, &batch.speakers)?;
        Ok(ForwardOutput {
            mel,
            log_duration,
            pitch,
            energy,
            emotion_logits,
            labels,
            durations,
            frames,
            pitch_hz,
        })
    }

    /// Classifier logits for every sequence of `batch`, `batch x 5`.
    pub fn emotion_logits(&self, params: &ParamStore, batch: &Batch) -> Result<Array2<f64>> {
        let ctx = Ctx::inference(params);
        let embedded = self.embed(&ctx, batch)?;
        let encoded = self.encode(&ctx, embedded, &batch.layout)?;
        let logits = self.classify(&ctx, embedded, encoded, &batch.layout)?;
        let v = ctx.tape.value(logits).clone();
        Ok(v)
    }

    /// Free-running synthesis of one phoneme sequence.
    pub fn synthesize(
        &self,
        params: &ParamStore,
        phonemes: &[usize],
        speaker: usize,
        forced: Option<EmotionPolarity>,
    ) -> Result<Inference> {
        if phonemes.is_empty() {
            return Err(Error::Contract("cannot synthesise an empty phoneme sequence".into()));
        }
        let batch = Batch::new(&[phonemes], vec![speaker], vec![0], None)?;
        let ctx = Ctx::inference(params);
        let control = InferenceControl { polarity: vec![forced] };
        let out = self.forward_infer(&ctx, &batch, &control)?;
        let t = &ctx.tape;
        let mel = t.value(out.mel).clone();
        if mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted mel".into()));
        }
        let logits = t.value(out.emotion_logits).row(0).to_vec();
        Ok(Inference {
            label: out.labels[0],
            logits,
            durations: out.durations,
            pitch_hz: out.pitch_hz,
            mel,
        })
    }

    /// Teacher-forced pass: ground-truth labels, durations, pitch and energy
    /// drive the conditioning and the expansion.
    pub fn forward_train(&self, ctx: &Ctx, batch: &Batch, targets: &Targets) -> Result<ForwardOutput> {
        self.run(ctx, batch, Some(targets), None)
    }

    /// Free-running pass from predicted variances.
    pub fn forward_infer(&self, ctx: &Ctx, batch: &Batch, control: &InferenceControl) -> Result<ForwardOutput> {
        if !control.polarity.is_empty() && control.polarity.len() != batch.layout.batch() {
            return Err(Error::shape("forced polarity", "one entry per sequence"));
        }
        let control = (!control.polarity.is_empty()).then_some(control);
        self.run(ctx, batch, None, control)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            conv_kernels: [3, 1],
            conv_filter: 16,
            predictor_filter: 8,
            n_mels: 6,
            n_speakers: 2,
            n_pitch_bins: 8,
            n_energy_bins: 8,
            phoneme_vocab_size: 10,
            classifier_channels: [2, 2, 2],
            ..ModelConfig::default()
        }
    }

    fn example(phonemes: Vec<usize>, durations: Vec<usize>, label: usize) -> Example {
        let l = phonemes.len();
        let t: usize = durations.iter().sum();
        Example {
            phonemes,
            speaker: 1,
            label,
            durations,
            pitch_hz: (0..l)
                .map(|i| if i % 2 == 0 { 120.0 + i as f64 } else { 0.0 })
                .collect(),
            energy: (0..l).map(|i| 0.1 * i as f64).collect(),
            mel: Array2::from_shape_fn((t, 6), |(i, j)| (i + j) as f64 * 0.01),
        }
    }

    #[test]
    fn buckets_and_normalisation() {
        let s = VarianceStats::from_phonemes(&[100.0, 0.0, 200.0], &[0.0, 1.0, 2.0]);
        assert!((s.pitch_log_mean - (100f64.ln() + 200f64.ln()) / 2.0).abs() < 1e-12);
        assert_eq!((s.energy_min, s.energy_max), (0.0, 2.0));
        assert_eq!(s.pitch_bucket(0.0, 256), 0);
        assert_eq!(s.pitch_bucket(64.9, 256), 0);
        assert_eq!(s.pitch_bucket(65.0, 256), 1);
        assert_eq!(s.pitch_bucket(1000.0, 256), 255);
        assert_eq!(s.pitch_bucket(5000.0, 256), 255);
        assert_eq!(s.energy_bucket(-1.0, 4), 0);
        assert_eq!(s.energy_bucket(1.0, 4), 2);
        assert_eq!(s.energy_bucket(9.0, 4), 3);
        let z = s.normalize_pitch(180.0);
        assert!((s.denormalize_pitch(z) - 180.0).abs() < 1e-9);
        assert_eq!(s.denormalize_pitch(s.normalize_pitch(0.0)), 0.0);
        assert!(s.normalize_pitch(0.0) < s.normalize_pitch(65.0));
    }

    #[test]
    fn duration_rounding_clamps_to_one() {
        assert_eq!(duration_from_log(0.0), 1);
        assert_eq!(duration_from_log(-30.0), 1);
        assert_eq!(duration_from_log(5f64.ln()), 4);
        assert_eq!(duration_from_log(f64::NAN), 1);
    }

    #[test]
    fn teacher_forced_shapes_follow_targets() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 0).unwrap();
        let a = example(vec![1, 2, 3], vec![2, 1, 3], 0);
        let b = example(vec![4, 5], vec![4, 4], 3);
        let (batch, targets) = collate(&[&a, &b], &model.stats, None).unwrap();
        let ctx = Ctx::new(&store, true, 1);
        let out = model.forward_train(&ctx, &batch, &targets).unwrap();
        assert_eq!(ctx.tape.shape(out.mel), (2 * 8, 6));
        assert_eq!(ctx.tape.shape(out.log_duration), (6, 1));
        assert_eq!(ctx.tape.shape(out.emotion_logits), (2, 5));
        assert_eq!(out.frames.lengths, vec![6, 8]);
        assert_eq!(out.labels, vec![0, 3]);

        // Larger padding on both axes.
        let (batch, targets) = collate(&[&a, &b], &model.stats, Some((5, 11))).unwrap();
        let ctx = Ctx::new(&store, false, 1);
        let out = model.forward_train(&ctx, &batch, &targets).unwrap();
        assert_eq!(ctx.tape.shape(out.mel), (22, 6));
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 5).unwrap();
        let a = example(vec![1, 2, 3], vec![2, 1, 3], 2);
        let run = |pad| {
            let (batch, targets) = collate(&[&a], &model.stats, pad).unwrap();
            let ctx = Ctx::inference(&store);
            let out = model.forward_train(&ctx, &batch, &targets).unwrap();
            let mel = ctx.tape.value(out.mel).slice(ndarray::s![..6, ..]).to_owned();
            let logits = ctx.tape.value(out.emotion_logits).clone();
            (mel, logits)
        };
        let (m1, l1) = run(None);
        let (m2, l2) = run(Some((7, 13)));
        for (x, y) in m1.iter().zip(m2.iter()).chain(l1.iter().zip(l2.iter())) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn inference_uses_predicted_durations_and_forcing() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 2).unwrap();
        let batch = Batch::new(&[&[1, 2, 3, 4]], vec![0], vec![0], None).unwrap();
        let ctx = Ctx::inference(&store);
        let forced = InferenceControl {
            polarity: vec![Some(EmotionPolarity::SlightNegative)],
        };
        let out = model.forward_infer(&ctx, &batch, &forced).unwrap();
        assert_eq!(out.labels, vec![1]);
        assert!(out.durations.iter().all(|&d| d >= 1));
        assert_eq!(out.frames.lengths[0], out.durations.iter().sum::<usize>());
        assert_eq!(ctx.tape.shape(out.mel).0, out.frames.rows());

        // With a zeroed duration head every phoneme gets one frame.
        let mut zeroed = store.clone();
        zeroed.get_mut(model.duration_predictor.head.weight).fill(0.0);
        let ctx = Ctx::inference(&zeroed);
        let out = model.forward_infer(&ctx, &batch, &InferenceControl::default()).unwrap();
        assert_eq!(out.durations, vec![1, 1, 1, 1]);
    }

    #[test]
    fn rejects_bad_ids() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 2).unwrap();
        let ctx = Ctx::inference(&store);
        let batch = Batch::new(&[&[1, 10]], vec![0], vec![0], None).unwrap();
        let err = model
            .forward_infer(&ctx, &batch, &InferenceControl::default())
            .unwrap_err();
        assert!(matches!(err, Error::OutOfVocabulary { id: 10, vocab: 10 }));
        let batch = Batch::new(&[&[1]], vec![2], vec![0], None).unwrap();
        assert!(matches!(
            model.forward_infer(&ctx, &batch, &InferenceControl::default()),
            Err(Error::UnknownSpeaker(_))
        ));
    }

    #[test]
    fn embedding_rows_differ_by_positions() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 4).unwrap();
        let seq = [3usize, 3, 7];
        let batch = Batch::new(&[&seq], vec![0], vec![0], None).unwrap();
        let ctx = Ctx::inference(&store);
        let x = model.embed(&ctx, &batch).unwrap();
        let x = ctx.tape.value(x).clone();
        let pe = sinusoid_table(2, 8);
        for j in 0..8 {
            let want = pe[[0, j]] - pe[[1, j]];
            assert!((x[[0, j]] - x[[1, j]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 5).unwrap();
        let seq: Vec<usize> = (0..7).collect();
        let batch = Batch::new(&[&seq], vec![0], vec![0], None).unwrap();
        let ctx = Ctx::inference(&store);
        let h = model
            .encode(&ctx, model.embed(&ctx, &batch).unwrap(), &batch.layout)
            .unwrap();
        assert_eq!(ctx.tape.shape(h), (7, 8));
        let frames = SeqLayout::tight(vec![50]);
        let z = ctx.tape.constant(Array2::from_elem((50, 8), 0.1));
        let mel = model.decode(&ctx, z, &frames, &[1]).unwrap();
        assert_eq!(ctx.tape.shape(mel), (50, 6));
    }

    #[test]
    fn inference_is_bitwise_repeatable() {
        let (model, store) = AcousticModel::new(tiny_config(), VarianceStats::default(), 6).unwrap();
        let a = model.synthesize(&store, &[1, 2, 3, 4], 0, None).unwrap();
        let b = model.synthesize(&store, &[1, 2, 3, 4], 0, None).unwrap();
        assert_eq!(a, b);
        let p = crate::emotion::softmax_rows(&Array2::from_shape_vec((1, 5), a.logits.clone()).unwrap());
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }
}
