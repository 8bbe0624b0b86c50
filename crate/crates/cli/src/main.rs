use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emspeech_core::audio::{wav_duration_s, WavPolicy};
use emspeech_core::corpus::{compute_stats, parse_alignment, parse_manifest};
use emspeech_core::dataset::{
    cache_root, load_dataset, prepare_corpus, to_examples, write_dataset, PreparedUtterance, SymbolTable,
};
use emspeech_core::evaluation::{classifier_accuracy, probe_controllability};
use emspeech_core::pipeline::{encode_texts, parse_split_tsv, setup_training, split_tsv};
use emspeech_core::synth::{Lexicon, SynthesisReport, SynthesisRequest, Synthesizer};
use emspeech_core::trainer::{StepReport, Trainer};
use emspeech_core::{EmotionPolarity, Error, FeatureConfig, Result, RunConfig};

const DATASET_FILE: &str = "dataset.tsv";
const SPLIT_FILE: &str = "split.tsv";
const LOG_FILE: &str = "train_log.tsv";
const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

#[derive(Parser)]
#[command(name = "emspeech", version, about = "Emotion-controllable speech synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features for a manifest and write `dataset.tsv` into the output directory.
    Prepare(PrepareArgs),
    /// Print corpus statistics for a manifest.
    Stats(StatsArgs),
    /// Train on a prepared directory.
    Train(TrainArgs),
    /// Synthesise one utterance from a checkpoint.
    Synth(SynthArgs),
    /// Report classifier accuracy on a split of a prepared directory.
    EvalClassifier(EvalArgs),
    /// Compare durations and pitch slopes under two forced polarities.
    ProbeControl(ProbeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wav_dir: PathBuf,
    #[arg(long)]
    align_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Run config whose `[features]` section sets extraction parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Downmix and resample mismatched WAVs instead of rejecting them.
    #[arg(long)]
    convert_audio: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(
        value_name = "MANIFEST",
        required_unless_present = "manifest",
        conflicts_with = "manifest"
    )]
    path: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Read audio durations from `<id>.wav` files here.
    #[arg(long, conflicts_with = "align_dir")]
    wav_dir: Option<PathBuf>,
    /// Read audio durations from the end of `<id>.align.tsv` files here.
    #[arg(long)]
    align_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Where the split, log and checkpoints go.
    #[arg(long)]
    out_dir: PathBuf,
    /// Prepared directory; defaults to the output directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured step budget.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required_unless_present = "phonemes", conflicts_with = "phonemes")]
    text: Option<String>,
    /// Space-separated phoneme symbols.
    #[arg(long)]
    phonemes: Option<String>,
    /// Word to phoneme lexicon, needed with `--text`.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Defaults to the only speaker of a single-speaker model.
    #[arg(long)]
    speaker: Option<String>,
    /// Forced emotion; the classifier decides when absent.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_polarity)]
    polarity: Option<EmotionPolarity>,
    /// Adds a second plot panel synthesised with this polarity.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_polarity)]
    compare: Option<EmotionPolarity>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long)]
    no_wav: bool,
    #[arg(long)]
    no_plot: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared directory holding `dataset.tsv`.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory of the training run holding `split.tsv`; defaults to the checkpoint's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    part: String,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// One text per line.
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    speaker: Option<String>,
    #[arg(long, default_value = "1", allow_hyphen_values = true, value_parser = parse_polarity)]
    first: EmotionPolarity,
    #[arg(long, default_value = "-1", allow_hyphen_values = true, value_parser = parse_polarity)]
    second: EmotionPolarity,
}

fn parse_polarity(s: &str) -> std::result::Result<EmotionPolarity, String> {
    s.parse()
        .map_err(|_| format!("{s:?} is not one of -1, -0.5, 0, 0.5, 1"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::EvalClassifier(a) => eval_classifier(a),
        Command::ProbeControl(a) => probe_control(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{message}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let config = run_config(a.config.as_deref())?;
    let policy = if a.convert_audio {
        WavPolicy::Convert
    } else {
        WavPolicy::Reject
    };
    create_dir(&a.out_dir)?;
    let cache = cache_root(&a.out_dir);
    let prepared = prepare_corpus(&a.manifest, &a.wav_dir, &a.align_dir, &cache, &config.features, policy)?;
    write_file(&a.out_dir.join(DATASET_FILE), write_dataset(&prepared))?;
    println!("prepared\t{}\t{}", prepared.len(), cache.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let path = a.path.or(a.manifest).expect("clap requires one manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::open(&path, e))?;
    let utterances = parse_manifest(&text)?;
    let durations: Option<Vec<f64>> = if let Some(dir) = &a.wav_dir {
        Some(
            utterances
                .iter()
                .map(|u| wav_duration_s(&dir.join(format!("{}.wav", u.id))))
                .collect::<Result<_>>()?,
        )
    } else if let Some(dir) = &a.align_dir {
        let end = |id: &str| -> Result<f64> {
            let p = dir.join(format!("{id}.align.tsv"));
            let record = parse_alignment(&fs::read_to_string(&p).map_err(|e| Error::open(&p, e))?)?;
            Ok(record.entries.last().map_or(0.0, |e| e.end_s))
        };
        Some(utterances.iter().map(|u| end(&u.id)).collect::<Result<_>>()?)
    } else {
        None
    };
    print!("{}", compute_stats(&utterances, durations.as_deref())?.report());
    Ok(())
}

fn load_prepared(data_dir: &Path, features: &FeatureConfig) -> Result<Vec<PreparedUtterance>> {
    let hash = features.hash();
    load_dataset(&data_dir.join(DATASET_FILE), &cache_root(data_dir), Some(&hash))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = run_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        config.train.max_steps = steps;
    }
    let data_dir = a.data_dir.as_deref().unwrap_or(&a.out_dir);
    let prepared = load_prepared(data_dir, &config.features)?;
    let mut setup = setup_training(&prepared, &config)?;
    create_dir(&a.out_dir)?;
    let ckpt_dir = a.out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&a.out_dir.join(SPLIT_FILE), split_tsv(&setup.split))?;
    write_file(&a.out_dir.join("config.toml"), config.to_kv())?;

    let log_path = a.out_dir.join(LOG_FILE);
    let log_err = |e| Error::io(log_path.display().to_string(), e);
    let mut log = if let Some(resume) = &a.checkpoint {
        let (mut trainer, meta) = Trainer::load_checkpoint(resume, Some(&setup.trainer.model.config))?;
        if meta.phonemes != setup.meta.phonemes || meta.speakers != setup.meta.speakers {
            return Err(Error::Checkpoint(
                "checkpoint symbol tables differ from the prepared corpus".into(),
            ));
        }
        trainer.config.max_steps = config.train.max_steps;
        setup.trainer = trainer;
        let kept = match fs::read_to_string(&log_path) {
            Ok(text) => keep_log_until(&text, setup.trainer.step),
            Err(_) => format!("{}\n", StepReport::TSV_HEADER),
        };
        write_file(&log_path, kept)?;
        OpenOptions::new().append(true).open(&log_path).map_err(log_err)?
    } else {
        let mut f = File::create(&log_path).map_err(log_err)?;
        writeln!(f, "{}", StepReport::TSV_HEADER).map_err(log_err)?;
        f
    };

    let cfg = setup.trainer.config.clone();
    let meta = setup.meta.clone();
    let until = cfg.max_steps;
    setup.trainer.run(&setup.train, &setup.schedule, until, |t, r| {
        if r.step == 1 || r.step % cfg.log_every.max(1) == 0 || r.step == until {
            writeln!(log, "{}", r.tsv_row()).map_err(log_err)?;
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            t.save_checkpoint(&ckpt_dir.join(format!("step_{:06}.ckpt", r.step)), &meta)?;
        }
        Ok(())
    })?;
    let final_path = a.out_dir.join(FINAL_CHECKPOINT);
    setup.trainer.save_checkpoint(&final_path, &meta)?;
    println!("trained\t{}\t{}", setup.trainer.step, final_path.display());
    Ok(())
}

/// Header plus the log rows at or before `step`.
fn keep_log_until(text: &str, step: u64) -> String {
    let mut out = format!("{}\n", StepReport::TSV_HEADER);
    for line in text.lines().skip(1) {
        let row_step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if row_step.is_some_and(|s| s <= step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn load_synthesizer(path: &Path) -> Result<Synthesizer> {
    let (trainer, meta) = Trainer::load_checkpoint(path, None)?;
    Synthesizer::new(trainer.model, trainer.params, &meta)
}

fn default_speaker(s: &Synthesizer, given: Option<String>) -> Result<String> {
    match (given, s.speakers.symbols()) {
        (Some(g), _) => Ok(g),
        (None, [only]) => Ok(only.clone()),
        (None, all) => Err(Error::UnknownSpeaker(format!(
            "model has {} speakers; pass --speaker with one of {}",
            all.len(),
            all.join(", ")
        ))),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let synthesizer = load_synthesizer(&a.checkpoint)?;
    let lexicon = a.lexicon.as_deref().map(Lexicon::load).transpose()?;
    let speaker = default_speaker(&synthesizer, a.speaker)?;
    let mut request = SynthesisRequest::new(a.text, a.phonemes, speaker, a.polarity)?;
    request.compare = a.compare;
    request.outputs.wav = !a.no_wav;
    request.outputs.plot = !a.no_plot;
    let report: SynthesisReport = synthesizer.synthesize(&request, lexicon.as_ref(), &a.out_dir, &a.name)?;
    if report.unknown_spans > 0 {
        eprintln!(
            "warning\tunknown\t{} span(s) synthesised as <unk>",
            report.unknown_spans
        );
    }
    println!("{}", SynthesisReport::TSV_HEADER);
    println!("{}", report.tsv_row());
    Ok(())
}

fn eval_classifier(a: EvalArgs) -> Result<()> {
    let (trainer, meta) = Trainer::load_checkpoint(&a.checkpoint, None)?;
    let prepared = load_prepared(&a.data_dir, &meta.features.unwrap_or_default())?;
    let chosen: Vec<&PreparedUtterance> = if a.part == "all" {
        prepared.iter().collect()
    } else {
        let run_dir = a.out_dir.unwrap_or_else(|| {
            a.checkpoint
                .parent()
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
        });
        let split_path = run_dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&split_path).map_err(|e| Error::open(&split_path, e))?;
        let ids: std::collections::HashSet<String> = parse_split_tsv(&text)?
            .into_iter()
            .filter(|(_, part)| *part == a.part)
            .map(|(id, _)| id)
            .collect();
        prepared.iter().filter(|p| ids.contains(&p.utterance.id)).collect()
    };
    if chosen.is_empty() {
        return Err(Error::CorpusTooSmall { needed: 1, got: 0 });
    }
    let phonemes = SymbolTable::new(meta.phonemes)?;
    let speakers = SymbolTable::new(meta.speakers)?;
    let examples = to_examples(&chosen, &phonemes, &speakers)?;
    let report = classifier_accuracy(&trainer.model, &trainer.params, &examples, 16)?;
    print!("{}", report.summary());
    print!("{}", report.confusion_tsv());
    Ok(())
}

fn probe_control(a: ProbeArgs) -> Result<()> {
    let synthesizer = load_synthesizer(&a.checkpoint)?;
    let lexicon = Lexicon::load(&a.lexicon)?;
    let text = fs::read_to_string(&a.texts).map_err(|e| Error::open(&a.texts, e))?;
    let texts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let ids = encode_texts(&texts, &lexicon, &synthesizer.phonemes)?;
    let speaker = synthesizer.speaker_index(&default_speaker(&synthesizer, a.speaker)?)?;
    let report = probe_controllability(
        &synthesizer.model,
        &synthesizer.params,
        &ids,
        speaker,
        (a.first, a.second),
    )?;
    print!("{}", report.rows_tsv());
    print!("{}", report.summary());
    Ok(())
}
