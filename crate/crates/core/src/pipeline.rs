//! Assembly of a training run from a prepared corpus and a run config.

use std::collections::HashMap;

use crate::config::RunConfig;
use crate::corpus::{split_corpus_with, CorpusSplit, SplitStrategy};
use crate::dataset::{to_examples, variance_stats, PreparedUtterance, SymbolTable};
use crate::error::{Error, Result};
use crate::model::{AcousticModel, Example};
use crate::synth::Lexicon;
use crate::trainer::{BatchSchedule, CheckpointMeta, Trainer};

pub struct TrainingSetup {
    pub trainer: Trainer,
    pub meta: CheckpointMeta,
    pub split: CorpusSplit,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub schedule: BatchSchedule,
}

impl TrainingSetup {
    pub fn phonemes(&self) -> Result<SymbolTable> {
        SymbolTable::new(self.meta.phonemes.clone())
    }
}

/// Splits the corpus, builds symbol tables over all of it, fits variance
/// statistics on the training part, and initialises model and optimiser
/// from `train.seed`.
pub fn setup_training(prepared: &[PreparedUtterance], run: &RunConfig) -> Result<TrainingSetup> {
    let features = &run.features;
    let train_cfg = &run.train;
    let utterances: Vec<_> = prepared.iter().map(|p| p.utterance.clone()).collect();
    let strategy = if train_cfg.stratified_split {
        SplitStrategy::Stratified
    } else {
        SplitStrategy::Random
    };
    let split = split_corpus_with(&utterances, train_cfg.seed, train_cfg.n_val, train_cfg.n_test, strategy)?;
    let by_id: HashMap<&str, &PreparedUtterance> = prepared.iter().map(|p| (p.utterance.id.as_str(), p)).collect();
    let part = |us: &[crate::corpus::Utterance]| -> Vec<&PreparedUtterance> {
        us.iter().map(|u| by_id[u.id.as_str()]).collect()
    };
    let (train_p, val_p, test_p) = (part(&split.train), part(&split.val), part(&split.test));

    let phonemes = SymbolTable::phonemes(prepared.iter().map(|p| p.utterance.phonemes.as_slice()));
    let speakers = SymbolTable::speakers(prepared.iter().map(|p| p.utterance.speaker_id.as_str()));
    if features.n_mels != run.model.n_mels {
        return Err(Error::Config(format!(
            "features carry {} mel bands but the model expects {}",
            features.n_mels, run.model.n_mels
        )));
    }
    let mut model_cfg = run.model.clone();
    model_cfg.phoneme_vocab_size = phonemes.len();
    model_cfg.n_speakers = speakers.len();

    let train = to_examples(&train_p, &phonemes, &speakers)?;
    let val = to_examples(&val_p, &phonemes, &speakers)?;
    let test = to_examples(&test_p, &phonemes, &speakers)?;
    let (model, params) = AcousticModel::new(model_cfg, variance_stats(&train_p), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, params, train_cfg.clone())?;
    trainer.set_class_balance(&train);
    let schedule = BatchSchedule::for_examples(&train, train_cfg.batch_size, train_cfg.seed)?;
    let meta = CheckpointMeta {
        phonemes: phonemes.symbols().to_vec(),
        speakers: speakers.symbols().to_vec(),
        features: Some(features.clone()),
    };
    Ok(TrainingSetup {
        trainer,
        meta,
        split,
        train,
        val,
        test,
        schedule,
    })
}

/// `id<TAB>part` rows for a split.
pub fn split_tsv(split: &CorpusSplit) -> String {
    let mut out = String::from("id\tpart\n");
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for u in part {
            out.push_str(&format!("{}\t{name}\n", u.id));
        }
    }
    out
}

/// Converts texts to phoneme ids through a lexicon, failing on any lexicon miss.
pub fn encode_texts(texts: &[String], lexicon: &Lexicon, phonemes: &SymbolTable) -> Result<Vec<Vec<usize>>> {
    texts
        .iter()
        .map(|t| {
            let g = lexicon.g2p(t)?;
            if g.unknown_spans > 0 {
                return Err(Error::Contract(format!(
                    "{t:?} has {} spans missing from the lexicon",
                    g.unknown_spans
                )));
            }
            phonemes.encode(&g.phonemes)
        })
        .collect()
}

/// Reads [`split_tsv`] output back into `(id, part)` pairs.
pub fn parse_split_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some("id\tpart") {
        return Err(Error::Parse {
            line: 1,
            message: "expected header \"id\\tpart\"".into(),
        });
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((id, part @ ("train" | "val" | "test"))) => Ok((id.to_string(), part.to_string())),
            _ => Err(Error::Parse {
                line: i + 1,
                message: format!("bad split row {l:?}"),
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmotionPolarity, Utterance};

    #[test]
    fn split_tsv_round_trips() {
        let u = |id: &str| Utterance::new(id, "s", EmotionPolarity::Neutral, "t");
        let split = CorpusSplit {
            train: vec![u("a"), u("b")],
            val: vec![u("c")],
            test: vec![u("d")],
        };
        let rows = parse_split_tsv(&split_tsv(&split)).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2], ("c".to_string(), "val".to_string()));
        assert!(parse_split_tsv("id\tpart\nx\tother\n").is_err());
        assert!(parse_split_tsv("nope\n").is_err());
    }
}
