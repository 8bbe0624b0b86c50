//! Acceptance gates. Each criterion prints one `PASS`/`FAIL` line; the process
//! exits nonzero when any gate fails.
//!
//! Set `EMSPEECH_EMOVIE_MANIFEST` to a real corpus manifest to add its label
//! counts to criterion 8.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use emspeech_core::audio::WavPolicy;
use emspeech_core::config::{ClassifierInput, LossWeights, ModelConfig, RunConfig};
use emspeech_core::corpus::{compute_stats, parse_manifest, write_manifest, AlignmentEntry, AlignmentRecord};
use emspeech_core::dataset::{prepare_corpus, PreparedUtterance};
use emspeech_core::evaluation::{classifier_accuracy, probe_controllability};
use emspeech_core::features::durations_from_alignment;
use emspeech_core::fixture::{bundled_dir, generate, FixtureSpec};
use emspeech_core::model::{collate, AcousticModel, Example, InferenceControl, VarianceStats};
use emspeech_core::nn::{Ctx, ParamStore};
use emspeech_core::pipeline::{encode_texts, setup_training, TrainingSetup};
use emspeech_core::synth::Lexicon;
use emspeech_core::trainer::{loss_and_grads, lr_schedule, Adam, LossBreakdown, StepReport, Trainer};
use emspeech_core::{EmotionPolarity, Result};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(n: u32, name: &str, elapsed: Duration, outcome: &Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail.clone()),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} criterion {n} {name}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed())
}

fn main() -> ExitCode {
    let mut all = true;

    let (o, t) = timed(shape_suite);
    let o = o.map(|o| Outcome::new(o.pass && t < Duration::from_secs(60), o.detail));
    all &= report(1, "shapes and invariants", t, &o);

    let (o, t) = timed(gradcheck);
    let o = o.map(|o| Outcome::new(o.pass && t < Duration::from_secs(120), o.detail));
    all &= report(2, "gradient check", t, &o);

    let (runs, t) = timed(|| TrainingRuns::start(bundled_dir()));
    match runs {
        Ok(mut runs) => {
            all &= report(3, "overfit", t, &Ok(runs.overfit()));
            let (o, t5) = timed(|| runs.controllability());
            all &= report(5, "controllability", t5, &o);
            let (o, t6) = timed(|| runs.determinism());
            all &= report(6, "determinism", t6, &o);
        }
        Err(e) => {
            for (n, name) in [(3, "overfit"), (5, "controllability"), (6, "determinism")] {
                all &= report(n, name, t, &Ok(Outcome::new(false, format!("error: {e}"))));
            }
        }
    }

    let (o, t) = timed(classifier_gate);
    all &= report(4, "classifier", t, &o);

    let (o, t) = timed(optimiser_gate);
    all &= report(7, "schedule and optimiser", t, &o);

    let (o, t) = timed(stats_gate);
    all &= report(8, "corpus statistics", t, &o);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn random_example(rng: &mut ChaCha8Rng, len: usize, vocab: usize, speakers: usize, n_mels: usize) -> Example {
    let mut durations: Vec<usize> = (0..len).map(|_| rng.random_range(0..=3)).collect();
    if durations.iter().all(|&d| d == 0) {
        durations[rng.random_range(0..len)] = 1;
    }
    let frames: usize = durations.iter().sum();
    Example {
        phonemes: (0..len).map(|_| rng.random_range(0..vocab)).collect(),
        speaker: rng.random_range(0..speakers),
        label: rng.random_range(0..EmotionPolarity::COUNT),
        durations,
        pitch_hz: (0..len)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(80.0..300.0)
                }
            })
            .collect(),
        energy: (0..len).map(|_| rng.random_range(0.0..5.0)).collect(),
        mel: Array2::from_shape_fn((frames, n_mels), |_| rng.random_range(-8.0..2.0)),
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let d_model = n_heads * rng.random_range(1..=4) * 2;
    ModelConfig {
        d_model,
        n_heads,
        encoder_layers: rng.random_range(1..=2),
        decoder_layers: rng.random_range(1..=2),
        conv_kernels: [[1, 3, 5][rng.random_range(0..3)], 1],
        conv_filter: 2 * d_model,
        predictor_kernel: [1, 3][rng.random_range(0..2)],
        predictor_filter: d_model,
        n_mels: rng.random_range(2..=12),
        n_speakers: rng.random_range(1..=3),
        n_pitch_bins: rng.random_range(2..=16),
        n_energy_bins: rng.random_range(2..=16),
        phoneme_vocab_size: rng.random_range(2..=20),
        classifier_channels: [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
        ],
        classifier_input: if rng.random_bool(0.5) {
            ClassifierInput::Encoder
        } else {
            ClassifierInput::Embedding
        },
        classifier_stop_gradient: rng.random_bool(0.5),
        use_energy: rng.random_bool(0.7),
        use_speaker_embedding: rng.random_bool(0.7),
        ..ModelConfig::default()
    }
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok && failures.len() < 5 {
        failures.push(what());
    }
}

fn shape_suite() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut worst_pad = 0.0f64;
    let configs = 200;
    for case in 0..configs {
        let cfg = random_config(&mut rng);
        let batch_size = rng.random_range(1..=3);
        let lengths: Vec<usize> = (0..batch_size).map(|_| rng.random_range(1..=50)).collect();
        let examples: Vec<Example> = lengths
            .iter()
            .map(|&l| random_example(&mut rng, l, cfg.phoneme_vocab_size, cfg.n_speakers, cfg.n_mels))
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let pitch: Vec<f64> = examples.iter().flat_map(|e| e.pitch_hz.clone()).collect();
        let energy: Vec<f64> = examples.iter().flat_map(|e| e.energy.clone()).collect();
        let stats = VarianceStats::from_phonemes(&pitch, &energy);
        let (model, params) = AcousticModel::new(cfg.clone(), stats, case)?;
        let (l_max, d) = (*lengths.iter().max().unwrap(), cfg.d_model);
        let sums: Vec<usize> = examples.iter().map(|e| e.durations.iter().sum()).collect();
        let t_max = *sums.iter().max().unwrap();

        let (batch, targets) = collate(&refs, &model.stats, None)?;
        let ctx = Ctx::new(&params, true, case);
        let embedded = model.embed(&ctx, &batch)?;
        check(
            &mut failures,
            ctx.tape.shape(embedded) == (batch_size * l_max, d),
            || format!("case {case}: embedding"),
        );
        let encoded = model.encode(&ctx, embedded, &batch.layout)?;
        check(
            &mut failures,
            ctx.tape.shape(encoded) == (batch_size * l_max, d),
            || format!("case {case}: encoder"),
        );
        let out = model.forward_train(&ctx, &batch, &targets)?;
        let t = &ctx.tape;
        check(&mut failures, t.shape(out.emotion_logits) == (batch_size, 5), || {
            format!("case {case}: logits")
        });
        for (name, v) in [
            ("log_duration", Some(out.log_duration)),
            ("pitch", Some(out.pitch)),
            ("energy", out.energy),
        ] {
            if let Some(v) = v {
                check(&mut failures, t.shape(v) == (batch_size * l_max, 1), || {
                    format!("case {case}: {name}")
                });
            }
        }
        check(&mut failures, out.energy.is_some() == cfg.use_energy, || {
            format!("case {case}: energy presence")
        });
        check(&mut failures, out.frames.lengths == sums, || {
            format!("case {case}: regulated lengths {:?} vs {sums:?}", out.frames.lengths)
        });
        check(
            &mut failures,
            t.shape(out.mel) == (batch_size * t_max, cfg.n_mels),
            || format!("case {case}: mel {:?}", t.shape(out.mel)),
        );

        let infer = Ctx::inference(&params);
        let control = InferenceControl {
            polarity: (0..batch_size)
                .map(|_| {
                    rng.random_bool(0.5)
                        .then(|| EmotionPolarity::ALL[rng.random_range(0..5)])
                })
                .collect(),
        };
        let out = model.forward_infer(&infer, &batch, &control)?;
        let rows: Vec<&[usize]> = out
            .durations
            .chunks(l_max)
            .zip(&lengths)
            .map(|(d, &l)| &d[..l])
            .collect();
        let per_item: Vec<usize> = rows.iter().map(|d| d.iter().sum()).collect();
        check(
            &mut failures,
            out.durations.len() == batch_size * l_max && rows.iter().all(|d| d.iter().all(|&x| x >= 1)),
            || format!("case {case}: inference durations"),
        );
        check(&mut failures, out.frames.lengths == per_item, || {
            format!("case {case}: inference lengths")
        });
        let rows = batch_size * per_item.iter().max().unwrap();
        check(&mut failures, infer.tape.shape(out.mel) == (rows, cfg.n_mels), || {
            format!("case {case}: inference mel")
        });
        for (b, forced) in control.polarity.iter().enumerate() {
            if let Some(p) = forced {
                check(&mut failures, out.labels[b] == p.class_index(), || {
                    format!("case {case}: forcing")
                });
            }
        }

        let empty = Example {
            phonemes: vec![],
            speaker: 0,
            label: 0,
            durations: vec![],
            pitch_hz: vec![],
            energy: vec![],
            mel: Array2::zeros((0, cfg.n_mels)),
        };
        let mut padded = refs.clone();
        padded.push(&empty);
        padded.insert(0, &empty);
        let w = LossWeights::default();
        let (a, _, _) = loss_and_grads(&model, &params, &refs, &w, None, None, false)?;
        let (b, _, _) = loss_and_grads(&model, &params, &padded, &w, None, None, false)?;
        for (x, y) in a.values().iter().zip(b.values()) {
            worst_pad = worst_pad.max((x - y).abs());
        }

        let n_frames = rng.random_range(1..=400);
        let hop_s = 256.0 / 22050.0;
        let total_s = n_frames as f64 * hop_s;
        let n_entries = rng.random_range(1..=50);
        let mut cuts: Vec<f64> = (0..n_entries - 1).map(|_| rng.random_range(0.0..total_s)).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.retain(|&c| c > 1e-6 && c < total_s - 1e-6);
        let mut bounds = vec![0.0];
        bounds.extend(cuts);
        bounds.push(total_s);
        let entries = bounds
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| AlignmentEntry {
                phoneme: "a".into(),
                start_s: w[0],
                end_s: w[1],
            })
            .collect();
        let durations = durations_from_alignment(&AlignmentRecord::new(entries)?, 22050, 256, n_frames)?;
        check(&mut failures, durations.iter().sum::<usize>() == n_frames, || {
            format!("case {case}: alignment durations")
        });
    }
    check(&mut failures, worst_pad <= 1e-6, || {
        format!("padding changed losses by {worst_pad:e}")
    });
    for p in EmotionPolarity::ALL {
        let back = EmotionPolarity::from_class_index(p.class_index())?;
        let parsed: EmotionPolarity = p.to_string().parse()?;
        let from_value = EmotionPolarity::from_value(p.value())?;
        check(&mut failures, back == p && parsed == p && from_value == p, || {
            format!("polarity {p} round trip")
        });
    }
    check(&mut failures, EmotionPolarity::from_class_index(5).is_err(), || {
        "class index 5 accepted".into()
    });
    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{configs} configs, max padding delta {worst_pad:.1e}")
        } else {
            failures.join("; ")
        },
    ))
}

/// Denominator floor for relative errors. Central differences on a loss near
/// 50 with step 1e-5 carry about 1e-9 of rounding noise, so gradients below
/// the floor are judged against 1e-4 * floor in absolute terms.
const GRAD_FLOOR: f64 = 1e-5;

fn gradcheck() -> Result<Outcome> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 1,
        encoder_layers: 1,
        decoder_layers: 1,
        conv_kernels: [3, 1],
        conv_filter: 8,
        predictor_kernel: 3,
        predictor_filter: 8,
        n_mels: 4,
        n_speakers: 1,
        n_pitch_bins: 8,
        n_energy_bins: 8,
        phoneme_vocab_size: 6,
        classifier_channels: [2, 2, 2],
        ..ModelConfig::default()
    };
    let example = Example {
        phonemes: vec![1, 4, 2],
        speaker: 0,
        label: 3,
        durations: vec![2, 1, 2],
        pitch_hz: vec![140.0, 0.0, 110.0],
        energy: vec![1.5, 0.4, 2.2],
        mel: array![
            [-1.0, -2.0, -3.0, -0.5],
            [-1.2, -1.8, -2.5, -0.7],
            [-4.0, -3.0, -2.0, -1.0],
            [-1.1, -0.2, -0.9, -2.0],
            [-0.3, -0.6, -1.5, -2.5]
        ],
    };
    let stats = VarianceStats::from_phonemes(&example.pitch_hz, &example.energy);
    let (model, mut params) = AcousticModel::new(cfg, stats, 11)?;
    // Jitter away from the zero-bias initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    let w = LossWeights::default();
    let (base, _, grads) = loss_and_grads(&model, &params, &[&example], &w, None, None, true)?;
    let grads = grads.expect("requested");
    let loss =
        |p: &ParamStore| -> Result<f64> { Ok(loss_and_grads(&model, p, &[&example], &w, None, None, false)?.0.total) };
    let h = 1e-5;
    let mut probe = params.clone();
    let (mut worst, mut worst_at, mut checked, mut bad) = (0.0f64, String::new(), 0usize, 0usize);
    for (k, &id) in ids.iter().enumerate() {
        let (rows, cols) = params.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let x0 = params.get(id)[[r, c]];
                probe.get_mut(id)[[r, c]] = x0 + h;
                let up = loss(&probe)?;
                probe.get_mut(id)[[r, c]] = x0 - h;
                let down = loss(&probe)?;
                probe.get_mut(id)[[r, c]] = x0;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[k][[r, c]];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_FLOOR);
                checked += 1;
                if rel >= 1e-4 {
                    bad += 1;
                }
                if rel > worst {
                    worst = rel;
                    worst_at = format!(
                        "{}[{r},{c}] analytic {analytic:.3e} numeric {numeric:.3e}",
                        params.name(id)
                    );
                }
            }
        }
    }
    Ok(Outcome::new(
        bad == 0,
        format!(
            "loss {:.2}, {checked} scalars, max relative error {worst:.2e} at {worst_at}, {bad} over 1e-4",
            base.total
        ),
    ))
}

fn prepare_dir(dir: &Path, cache: &Path, run: &RunConfig) -> Result<Vec<PreparedUtterance>> {
    prepare_corpus(
        &dir.join("manifest.tsv"),
        &dir.join("wav"),
        &dir.join("align"),
        cache,
        &run.features,
        WavPolicy::Reject,
    )
}

struct TrainingRuns {
    run: RunConfig,
    prepared: Vec<PreparedUtterance>,
    a: TrainingSetup,
    log_a: Vec<StepReport>,
    initial: LossBreakdown,
    fixture_dir: std::path::PathBuf,
    _cache: tempfile::TempDir,
}

impl TrainingRuns {
    fn start(fixture_dir: std::path::PathBuf) -> Result<Self> {
        let run = RunConfig::load(&fixture_dir.join("train.toml"))?;
        let cache = tempfile::tempdir().map_err(|e| emspeech_core::Error::io("tempdir", e))?;
        let prepared = prepare_dir(&fixture_dir, cache.path(), &run)?;
        let mut a = setup_training(&prepared, &run)?;
        let initial = a.trainer.evaluate(&a.train)?;
        let log_a = full_run(&mut a)?;
        Ok(Self {
            run,
            prepared,
            a,
            log_a,
            initial,
            fixture_dir,
            _cache: cache,
        })
    }

    fn overfit(&self) -> Outcome {
        let last = self.log_a.last().map(|r| r.loss).unwrap_or_default();
        match self.a.trainer.evaluate(&self.a.train) {
            Ok(fin) => {
                let ratio = fin.mel_mae / self.initial.mel_mae;
                Outcome::new(
                    self.log_a.len() == 2000 && ratio < 0.1 && fin.emotion_ce < 0.1,
                    format!(
                        "{} utterances, {} steps, batch {}: mel MAE {:.4} -> {:.4} (ratio {ratio:.3}), emotion CE {:.2e} (last batch: MAE {:.4}, CE {:.2e})",
                        self.a.train.len(),
                        self.log_a.len(),
                        self.run.train.batch_size,
                        self.initial.mel_mae,
                        fin.mel_mae,
                        fin.emotion_ce,
                        last.mel_mae,
                        last.emotion_ce
                    ),
                )
            }
            Err(e) => Outcome::new(false, format!("error: {e}")),
        }
    }

    fn controllability(&self) -> Result<Outcome> {
        let lexicon = Lexicon::load(&self.fixture_dir.join("lexicon.tsv"))?;
        let text = std::fs::read_to_string(self.fixture_dir.join("probe.txt"))
            .map_err(|e| emspeech_core::Error::io("probe.txt", e))?;
        let texts: Vec<String> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        let seen: Vec<&str> = self.prepared.iter().map(|p| p.utterance.text.as_str()).collect();
        let held_out = texts.iter().all(|t| !seen.contains(&t.as_str()));
        let ids = encode_texts(&texts, &lexicon, &self.a.phonemes()?)?;
        let t = &self.a.trainer;
        let probe = probe_controllability(
            &t.model,
            &t.params,
            &ids,
            0,
            (EmotionPolarity::StrongPositive, EmotionPolarity::StrongNegative),
        )?;
        let (shorter, steeper) = (probe.shorter_fraction(), probe.steeper_fraction());
        Ok(Outcome::new(
            held_out && texts.len() == 20 && shorter >= 0.9 && steeper >= 0.8,
            format!(
                "{} held-out texts: shorter under +1 {:.0}%, steeper under +1 {:.0}%; mean frames {:.1} vs {:.1}, mean slope {:.3} vs {:.3} Hz/frame",
                texts.len(),
                100.0 * shorter,
                100.0 * steeper,
                probe.mean_frames(EmotionPolarity::StrongPositive),
                probe.mean_frames(EmotionPolarity::StrongNegative),
                probe.mean_slope(EmotionPolarity::StrongPositive),
                probe.mean_slope(EmotionPolarity::StrongNegative)
            ),
        ))
    }

    fn determinism(&mut self) -> Result<Outcome> {
        let mut b = setup_training(&self.prepared, &self.run)?;
        let log_b = full_run(&mut b)?;
        let repeat = log_b == self.log_a && b.trainer.params == self.a.trainer.params;

        let half = self.run.train.max_steps / 2;
        let mut c = setup_training(&self.prepared, &self.run)?;
        let mut log_c = c.trainer.run(&c.train, &c.schedule, half, |_, _| Ok(()))?;
        let dir = tempfile::tempdir().map_err(|e| emspeech_core::Error::io("tempdir", e))?;
        let path = dir.path().join("half.ckpt");
        c.trainer.save_checkpoint(&path, &c.meta)?;
        let (mut resumed, meta) = Trainer::load_checkpoint(&path, Some(&c.trainer.model.config))?;
        log_c.extend(resumed.run(&c.train, &c.schedule, self.run.train.max_steps, |_, _| Ok(()))?);
        let resume = meta == c.meta && log_c == self.log_a && resumed.params == self.a.trainer.params;
        let first_diff = |other: &[StepReport]| other.iter().zip(&self.log_a).position(|(x, y)| x != y);
        Ok(Outcome::new(
            repeat && resume,
            format!(
                "repeat run identical: {repeat} (first differing step {:?}); resume at {half} identical: {resume} (first differing step {:?})",
                first_diff(&log_b).map(|i| i + 1),
                first_diff(&log_c).map(|i| i + 1)
            ),
        ))
    }
}

fn full_run(s: &mut TrainingSetup) -> Result<Vec<StepReport>> {
    let until = s.trainer.config.max_steps;
    s.trainer.run(&s.train, &s.schedule, until, |_, _| Ok(()))
}

fn classifier_gate() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| emspeech_core::Error::io("tempdir", e))?;
    let fixture = generate(&FixtureSpec::classifier());
    fixture.write(dir.path())?;
    let mut run = RunConfig::load(&bundled_dir().join("train.toml"))?;
    run.train.max_steps = 1000;
    let prepared = prepare_dir(dir.path(), &dir.path().join("cache"), &run)?;
    let mut s = setup_training(&prepared, &run)?;
    let accuracy =
        |t: &Trainer, data: &[Example]| classifier_accuracy(&t.model, &t.params, data, 16).map(|r| r.accuracy);
    let initial = accuracy(&s.trainer, &s.train)?;
    let mut curve = Vec::new();
    let mut reached = None;
    s.trainer.run(&s.train, &s.schedule, 1000, |t, r| {
        if r.step % 100 == 0 {
            let a = accuracy(t, &s.train)?;
            if a >= 0.95 && reached.is_none() {
                reached = Some(r.step);
            }
            curve.push(format!("{}:{a:.2}", r.step));
        }
        Ok(())
    })?;
    // Chance is 0.2 for five balanced classes; an untrained classifier must not beat 0.4.
    let chance = initial <= 0.4;
    Ok(Outcome::new(
        chance && reached.is_some(),
        format!(
            "{} utterances; accuracy at init {initial:.2}; reached 0.95 at step {}; curve {}",
            s.train.len(),
            reached.map_or("never".into(), |s| s.to_string()),
            curve.join(" ")
        ),
    ))
}

/// Independent Adam on three scalars, written from the update rule.
fn reference_adam(x: &mut [f64; 3], m: &mut [f64; 3], v: &mut [f64; 3], g: [f64; 3], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-9);
    for i in 0..3 {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - b1.powi(t));
        let v_hat = v[i] / (1.0 - b2.powi(t));
        x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn optimiser_gate() -> Result<Outcome> {
    let lr = lr_schedule(4000, 256, 4000)?;
    let oracle = 1.0 / (256f64.sqrt() * 4000f64.sqrt());
    let lr_ok = (lr - 9.882e-4).abs() <= 1e-7 && (lr - oracle).abs() < 1e-15;

    let grad = |x: &[f64]| -> [f64; 3] { [4.0 * x[0].powi(3), 2.0 * (x[1] - 1.0), (x[2] * 3.0).cos() * 3.0] };
    let mut store = ParamStore::new();
    let id = store.add("x", array![[1.3, -0.7, 0.2]]);
    let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
    let (mut x, mut m, mut v) = ([1.3, -0.7, 0.2], [0.0; 3], [0.0; 3]);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let lr = lr_schedule(t as u64, 256, 40)?;
        let g = grad(store.get(id).as_slice().expect("contiguous"));
        adam.step(
            &mut store,
            &[Array2::from_shape_vec((1, 3), g.to_vec()).expect("1x3")],
            lr,
        );
        let gx = grad(&x);
        reference_adam(&mut x, &mut m, &mut v, gx, t, lr);
        for (i, xi) in x.iter().enumerate() {
            worst = worst.max((store.get(id)[[0, i]] - xi).abs());
        }
    }
    Ok(Outcome::new(
        lr_ok && worst <= 1e-10,
        format!("lr(4000) = {lr:.7e}; Adam max deviation over 100 steps {worst:.1e}"),
    ))
}

fn stats_gate() -> Result<Outcome> {
    let emovie: BTreeMap<EmotionPolarity, usize> = [(-0.5, 4573), (0.5, 3171), (0.0, 1783), (-1.0, 179), (1.0, 78)]
        .into_iter()
        .map(|(v, c)| (EmotionPolarity::from_value(v).expect("valid"), c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut all_ok = true;
    let mut details = Vec::new();
    let random_counts: BTreeMap<EmotionPolarity, usize> = EmotionPolarity::ALL
        .iter()
        .map(|&p| (p, rng.random_range(0..300)))
        .collect();
    for (name, counts) in [("published label counts", &emovie), ("random", &random_counts)] {
        let mut utterances = Vec::new();
        for (&p, &c) in counts {
            for _ in 0..c {
                let id = format!("u{:05}", utterances.len());
                utterances.push(emspeech_core::Utterance::new(id, "spk", p, "ni hao"));
            }
        }
        for i in (1..utterances.len()).rev() {
            utterances.swap(i, rng.random_range(0..=i));
        }
        let parsed = parse_manifest(&write_manifest(&utterances))?;
        let stats = compute_stats(&parsed, None)?;
        let total: usize = counts.values().sum();
        let expected: BTreeMap<EmotionPolarity, usize> =
            counts.iter().filter(|(_, &c)| c > 0).map(|(&p, &c)| (p, c)).collect();
        let got: BTreeMap<EmotionPolarity, usize> = stats
            .polarity_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&p, &c)| (p, c))
            .collect();
        let ok = stats.total == total && got == expected;
        all_ok &= ok;
        details.push(format!(
            "{name} corpus of {total}: {}",
            if ok { "exact" } else { "mismatch" }
        ));
    }
    match std::env::var_os("EMSPEECH_EMOVIE_MANIFEST") {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| emspeech_core::Error::io(format!("{path:?}"), e))?;
            let stats = compute_stats(&parse_manifest(&text)?, None)?;
            // The published per-label counts sum to 9784, not the stated 9724.
            let got: BTreeMap<EmotionPolarity, usize> =
                stats.polarity_counts.into_iter().filter(|&(_, c)| c > 0).collect();
            let ok = got == emovie;
            all_ok &= ok;
            details.push(format!(
                "supplied manifest: label counts {}, total {} (stated 9724)",
                if ok { "match" } else { "differ" },
                stats.total
            ));
        }
        None => details.push("real manifest not supplied".into()),
    }
    Ok(Outcome::new(all_ok, details.join("; ")))
}
