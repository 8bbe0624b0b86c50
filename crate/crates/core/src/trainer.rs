//! Losses, learning-rate schedule, Adam, batching, checkpoints and the
//! training loop.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::corpus::EmotionPolarity;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{collate, AcousticModel, Batch, Example, ForwardOutput, Targets, VarianceStats};
use crate::nn::{Ctx, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_mae: f64,
    pub duration_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub emotion_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 6] = [
        "mel_mae",
        "duration_mse",
        "pitch_mse",
        "energy_mse",
        "emotion_ce",
        "total",
    ];

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.mel * self.mel_mae
            + w.duration * self.duration_mse
            + w.pitch * self.pitch_mse
            + w.energy * self.energy_mse
            + w.emotion * self.emotion_ce
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.mel_mae,
            self.duration_mse,
            self.pitch_mse,
            self.energy_mse,
            self.emotion_ce,
            self.total,
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Denominators behind a [`LossBreakdown`], for pooling over several batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossCounts {
    pub mel_cells: usize,
    pub phonemes: usize,
    pub emotion_weight: f64,
}

#[derive(Debug)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub counts: LossCounts,
}

fn row_mask(rows: usize, cols: usize, valid: &[bool]) -> Rc<Array2<f64>> {
    Rc::new(Array2::from_shape_fn((rows, cols), |(r, _)| {
        f64::from(u8::from(valid[r]))
    }))
}

fn masked_mean(tape: &Tape, residual: Var, mask: Rc<Array2<f64>>, count: usize, square: bool) -> Var {
    let r = if square {
        tape.square(residual)
    } else {
        tape.abs(residual)
    };
    tape.scale(tape.sum(tape.mul_const(r, mask)), 1.0 / count as f64)
}

/// MAE over valid mel cells, MSE over valid phonemes for log-duration, pitch
/// and energy, and cross-entropy over non-empty sequences.
pub fn compute_losses(
    tape: &Tape,
    out: &ForwardOutput,
    batch: &Batch,
    targets: &Targets,
    weights: &LossWeights,
    class_weights: Option<&[f64; EmotionPolarity::COUNT]>,
) -> Result<LossTerms> {
    let layout = &batch.layout;
    let (mel_rows, n_mels) = tape.shape(out.mel);
    if (mel_rows, n_mels) != targets.mel.dim() {
        return Err(Error::shape(
            "mel",
            format!("prediction {mel_rows}x{n_mels}, target {:?}", targets.mel.dim()),
        ));
    }
    for (name, v) in [
        ("log_duration", Some(out.log_duration)),
        ("pitch", Some(out.pitch)),
        ("energy", out.energy),
    ] {
        if let Some(v) = v {
            if tape.shape(v) != (layout.rows(), 1) {
                return Err(Error::shape(
                    name,
                    format!("{:?}, expected {}x1", tape.shape(v), layout.rows()),
                ));
            }
        }
    }
    let n_targets = [targets.durations.len(), targets.pitch.len(), targets.energy.len()];
    if n_targets.iter().any(|&n| n != layout.rows()) {
        return Err(Error::shape(
            "targets",
            format!("{n_targets:?} values for {} rows", layout.rows()),
        ));
    }
    let cells = targets.frames.valid_positions() * n_mels;
    let phonemes = layout.valid_positions();
    if cells == 0 || phonemes == 0 {
        return Err(Error::Contract("batch has no valid positions".into()));
    }
    let frame_mask = row_mask(mel_rows, n_mels, &targets.frames.keep());
    let phone_mask = row_mask(layout.rows(), 1, &layout.keep());

    let mel_target = tape.constant(targets.mel.clone());
    let mel = masked_mean(tape, tape.sub(out.mel, mel_target), frame_mask, cells, false);
    let column = |values: Vec<f64>| tape.constant(Array2::from_shape_vec((values.len(), 1), values).expect("column"));
    let log_d = column(targets.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect());
    let duration = masked_mean(
        tape,
        tape.sub(out.log_duration, log_d),
        Rc::clone(&phone_mask),
        phonemes,
        true,
    );
    let pitch = masked_mean(
        tape,
        tape.sub(out.pitch, column(targets.pitch.clone())),
        Rc::clone(&phone_mask),
        phonemes,
        true,
    );
    let energy = match out.energy {
        Some(e) => masked_mean(
            tape,
            tape.sub(e, column(targets.energy.clone())),
            phone_mask,
            phonemes,
            true,
        ),
        None => tape.zeros(1, 1),
    };

    let item_weights: Vec<f64> = layout
        .lengths
        .iter()
        .zip(&batch.labels)
        .map(|(&len, &label)| match (len, class_weights) {
            (0, _) => 0.0,
            (_, Some(w)) => w[label],
            (_, None) => 1.0,
        })
        .collect();
    let emotion_weight: f64 = item_weights.iter().sum();
    if emotion_weight <= 0.0 {
        return Err(Error::Contract("no sequence carries emotion-loss weight".into()));
    }
    let emotion = tape.cross_entropy(out.emotion_logits, &batch.labels, Some(&item_weights));

    let terms = [
        (mel, weights.mel),
        (duration, weights.duration),
        (pitch, weights.pitch),
        (energy, weights.energy),
        (emotion, weights.emotion),
    ];
    let total = terms
        .iter()
        .map(|&(v, w)| tape.scale(v, w))
        .reduce(|a, b| tape.add(a, b))
        .expect("five terms");
    let breakdown = LossBreakdown {
        mel_mae: tape.scalar(mel),
        duration_mse: tape.scalar(duration),
        pitch_mse: tape.scalar(pitch),
        energy_mse: tape.scalar(energy),
        emotion_ce: tape.scalar(emotion),
        total: tape.scalar(total),
    };
    Ok(LossTerms {
        total,
        breakdown,
        counts: LossCounts {
            mel_cells: cells,
            phonemes,
            emotion_weight,
        },
    })
}

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`, for `step >= 1`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, _, p)| Array2::zeros(p.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            Zip::from(params.get_mut(id))
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which examples make up the batch at each step. Examples are visited in a
/// fresh seeded permutation per epoch, chunks of the permutation are sorted by
/// length, and batches are consecutive windows over the concatenated epochs,
/// so the batch of any step is known without replaying earlier steps.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

const BUCKET_BATCHES: usize = 8;

impl BatchSchedule {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Contract("cannot batch an empty training set".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            lengths,
            batch_size,
            seed,
        })
    }

    pub fn for_examples(examples: &[Example], batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(examples.iter().map(|e| e.phonemes.len()).collect(), batch_size, seed)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch)));
        for chunk in order.chunks_mut(self.batch_size * BUCKET_BATCHES) {
            chunk.sort_by_key(|&i| self.lengths[i]);
        }
        order
    }

    /// Example indices for the 1-based `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let n = self.lengths.len() as u64;
        let start = (step.max(1) - 1) * self.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (start..start + self.batch_size as u64)
            .map(|i| {
                let epoch = i / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    cached = Some((epoch, self.epoch_order(epoch)));
                }
                cached.as_ref().expect("filled").1[(i % n) as usize]
            })
            .collect()
    }
}

/// Inverse-frequency class weights normalised to mean 1 over the present classes.
pub fn class_weights(labels: &[usize]) -> [f64; EmotionPolarity::COUNT] {
    let mut counts = [0usize; EmotionPolarity::COUNT];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts.map(|c| if c == 0 { 0.0 } else { n / (present * c as f64) })
}

pub type LossAndGrads = (LossBreakdown, LossCounts, Option<Vec<Array2<f64>>>);

/// One teacher-forced pass over `examples`; returns the losses and, when
/// requested, the gradient of the total with respect to every parameter.
pub fn loss_and_grads(
    model: &AcousticModel,
    params: &ParamStore,
    examples: &[&Example],
    weights: &LossWeights,
    class_weights: Option<&[f64; EmotionPolarity::COUNT]>,
    dropout: Option<u64>,
    want_grads: bool,
) -> Result<LossAndGrads> {
    let (batch, targets) = collate(examples, &model.stats, None)?;
    let ctx = match dropout {
        Some(seed) => Ctx::new(params, true, seed),
        None => Ctx::inference(params),
    };
    let out = model.forward_train(&ctx, &batch, &targets)?;
    let terms = compute_losses(&ctx.tape, &out, &batch, &targets, weights, class_weights)?;
    let grads = want_grads.then(|| {
        let mut g = ctx.tape.backward(terms.total);
        ctx.param_grads(&mut g)
    });
    Ok((terms.breakdown, terms.counts, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

impl StepReport {
    pub const TSV_HEADER: &'static str = "step\tlr\tmel_mae\tduration_mse\tpitch_mse\tenergy_mse\temotion_ce\ttotal";

    pub fn tsv_row(&self) -> String {
        let mut row = format!("{}\t{}", self.step, self.lr);
        for v in self.loss.values() {
            row.push('\t');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// Vocabulary and feature settings carried next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phonemes: Vec<String>,
    pub speakers: Vec<String>,
    pub features: Option<FeatureConfig>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMSPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    stats: VarianceStats,
    step: u64,
    adam_t: u64,
    class_weights: Option<[f64; EmotionPolarity::COUNT]>,
    params: Vec<(String, [usize; 2])>,
    meta: CheckpointMeta,
}

/// Model, parameters and optimiser state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AcousticModel,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Number of completed optimiser steps.
    pub step: u64,
    pub class_weights: Option<[f64; EmotionPolarity::COUNT]>,
}

impl Trainer {
    pub fn new(model: AcousticModel, params: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Self {
            model,
            params,
            optimizer,
            config,
            step: 0,
            class_weights: None,
        })
    }

    /// Fixes class weights from the training labels when balancing is enabled.
    pub fn set_class_balance(&mut self, training: &[Example]) {
        self.class_weights = self
            .config
            .balance_emotion_classes
            .then(|| class_weights(&training.iter().map(|e| e.label).collect::<Vec<_>>()));
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        Ok(self.config.lr_scale * lr_schedule(step, self.model.config.d_model, self.config.warmup_steps)?)
    }

    /// One optimiser step on an explicit batch.
    pub fn step_on(&mut self, examples: &[&Example]) -> Result<StepReport> {
        let step = self.step + 1;
        let (loss, _, grads) = loss_and_grads(
            &self.model,
            &self.params,
            examples,
            &self.config.loss_weights,
            self.class_weights.as_ref(),
            Some(mix(self.config.seed, step)),
            true,
        )?;
        let mut grads = grads.expect("requested");
        let max_grad = grads.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
        let term = loss
            .non_finite_term()
            .or_else(|| (!max_grad.is_finite()).then_some("gradient"));
        if let Some(term) = term {
            return Err(Error::NonFiniteLoss { step, term, max_grad });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.lr(step)?;
        self.optimizer.step(&mut self.params, &grads, lr);
        self.step = step;
        Ok(StepReport {
            step,
            lr,
            grad_norm,
            loss,
        })
    }

    /// One optimiser step on the scheduled batch for the next step.
    pub fn train_step(&mut self, data: &[Example], schedule: &BatchSchedule) -> Result<StepReport> {
        let batch: Vec<&Example> = schedule.batch(self.step + 1).into_iter().map(|i| &data[i]).collect();
        self.step_on(&batch)
    }

    /// Runs until `until` completed steps, handing every report to `observe`.
    pub fn run(
        &mut self,
        data: &[Example],
        schedule: &BatchSchedule,
        until: u64,
        mut observe: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < until {
            let r = self.train_step(data, schedule)?;
            observe(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Teacher-forced losses over a whole set without dropout, pooled with
    /// the same denominators a single batch would use.
    pub fn evaluate(&self, data: &[Example]) -> Result<LossBreakdown> {
        evaluate(
            &self.model,
            &self.params,
            data,
            self.config.batch_size,
            &self.config.loss_weights,
            self.class_weights.as_ref(),
        )
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = CheckpointHeader {
            config_hash: self.model.config.hash(),
            model: self.model.config.clone(),
            train: self.config.clone(),
            stats: self.model.stats.clone(),
            step: self.step,
            adam_t: self.optimizer.t,
            class_weights: self.class_weights,
            params: self
                .params
                .iter()
                .map(|(_, n, v)| (n.to_string(), [v.nrows(), v.ncols()]))
                .collect(),
            meta: meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(24 + json.len() + 24 * self.params.n_scalars());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, _, v)| v)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let tmp = path.with_extension("partial");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Restores a run. With `expected`, the stored architecture must match it.
    pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Self, CheckpointMeta)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::open(path, e))?;
        let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        if header.model.hash() != header.config_hash {
            return Err(corrupt("stored config does not match its hash"));
        }
        if let Some(expected) = expected {
            if expected.hash() != header.config_hash {
                return Err(Error::ConfigMismatch {
                    stored: header.config_hash,
                    expected: expected.hash(),
                    diff: header.model.diff(expected),
                });
            }
        }
        let (model, mut params) = AcousticModel::new(header.model.clone(), header.stats.clone(), 0)?;
        let layout: Vec<(String, [usize; 2])> = params
            .iter()
            .map(|(_, n, v)| (n.to_string(), [v.nrows(), v.ncols()]))
            .collect();
        if layout != header.params {
            return Err(corrupt("parameter list does not match the stored architecture"));
        }
        let config = header.train.clone();
        config.validate()?;
        let mut optimizer = Adam::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        optimizer.t = header.adam_t;
        let mut payload = bytes[20 + header_len..].chunks_exact(8);
        let mut fill = |t: &mut Array2<f64>| -> Result<()> {
            for x in t.iter_mut() {
                let chunk = payload.next().ok_or_else(|| corrupt("truncated tensor payload"))?;
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            Ok(())
        };
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            fill(params.get_mut(id))?;
        }
        for t in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            fill(t)?;
        }
        if payload.next().is_some() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        let trainer = Self {
            model,
            params,
            optimizer,
            config,
            step: header.step,
            class_weights: header.class_weights,
        };
        Ok((trainer, header.meta))
    }
}

/// Pooled teacher-forced losses over `data` in chunks of `batch_size`.
pub fn evaluate(
    model: &AcousticModel,
    params: &ParamStore,
    data: &[Example],
    batch_size: usize,
    weights: &LossWeights,
    class_weights: Option<&[f64; EmotionPolarity::COUNT]>,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    let mut sums = [0.0; 5];
    let mut denoms = [0.0; 5];
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (l, c, _) = loss_and_grads(model, params, &refs, weights, class_weights, None, false)?;
        let d = [
            c.mel_cells as f64,
            c.phonemes as f64,
            c.phonemes as f64,
            c.phonemes as f64,
            c.emotion_weight,
        ];
        let v = [l.mel_mae, l.duration_mse, l.pitch_mse, l.energy_mse, l.emotion_ce];
        for k in 0..5 {
            sums[k] += v[k] * d[k];
            denoms[k] += d[k];
        }
    }
    let m = |k: usize| sums[k] / denoms[k];
    let mut out = LossBreakdown {
        mel_mae: m(0),
        duration_mse: m(1),
        pitch_mse: m(2),
        energy_mse: m(3),
        emotion_ce: m(4),
        total: 0.0,
    };
    out.total = out.weighted_total(weights);
    Ok(out)
}
