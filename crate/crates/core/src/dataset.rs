//! Prepared corpora: feature extraction with caching, symbol tables, and the
//! conversion of utterances into training examples.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{read_wav, WavPolicy};
use crate::corpus::{parse_alignment, parse_manifest, EmotionPolarity, Utterance};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features, AcousticFeatures, FeatureConfig, FeatureExtractor};
use crate::model::{Example, VarianceStats};

/// Symbol reserved for lexicon misses.
pub const UNK: &str = "<unk>";

/// Ordered symbol table; ids are positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("symbol {s:?} listed twice")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Phoneme inventory of a corpus: [`UNK`] first, then the sorted symbols.
    pub fn phonemes<'a>(sequences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let set: BTreeSet<&String> = sequences.into_iter().flatten().filter(|s| *s != UNK).collect();
        let symbols = std::iter::once(UNK.to_string())
            .chain(set.into_iter().cloned())
            .collect();
        Self::new(symbols).expect("deduplicated")
    }

    pub fn speakers<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = ids.into_iter().collect();
        Self::new(set.into_iter().map(str::to_string).collect()).expect("deduplicated")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, symbols: &[String]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s)
                    .or_else(|| self.id(UNK))
                    .ok_or_else(|| Error::Contract(format!("symbol {s:?} is not in the table")))
            })
            .collect()
    }
}

/// An utterance with its extracted features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtterance {
    pub utterance: Utterance,
    pub features: AcousticFeatures,
}

pub const DATASET_HEADER: &str = "id\tspeaker\tpolarity\ttext\tphonemes\tframes";

/// Where prepared features live: `EMSPEECH_CACHE` when set, else `<out_dir>/features`.
pub fn cache_root(out_dir: &Path) -> PathBuf {
    std::env::var_os("EMSPEECH_CACHE")
        .filter(|v| !v.is_empty())
        .map_or_else(|| out_dir.join("features"), PathBuf::from)
}

pub fn feature_path(cache: &Path, id: &str) -> PathBuf {
    cache.join(format!("{id}.feat"))
}

/// Reads `<align_dir>/<id>.align.tsv` and `<wav_dir>/<id>.wav` for every
/// manifest row and extracts features, reusing cache entries whose config hash matches.
pub fn prepare_corpus(
    manifest: &Path,
    wav_dir: &Path,
    align_dir: &Path,
    cache: &Path,
    config: &FeatureConfig,
    policy: WavPolicy,
) -> Result<Vec<PreparedUtterance>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::open(manifest, e))?;
    let utterances = parse_manifest(&text)?;
    fs::create_dir_all(cache).map_err(|e| Error::io(cache.display().to_string(), e))?;
    let extractor = FeatureExtractor::new(config.clone())?;
    let hash = config.hash();
    utterances
        .into_iter()
        .map(|mut u| {
            let align_path = align_dir.join(format!("{}.align.tsv", u.id));
            let align_text = fs::read_to_string(&align_path).map_err(|e| Error::open(&align_path, e))?;
            let alignment = parse_alignment(&align_text)?;
            if u.phonemes.is_empty() {
                u.phonemes = alignment.phonemes();
            } else {
                alignment.check_phonemes(&u.phonemes)?;
            }
            u.audio_path = wav_dir.join(format!("{}.wav", u.id));
            u.alignment_path = Some(align_path);
            let cached = feature_path(cache, &u.id);
            let features = match read_features(&cached, Some(&hash)) {
                Ok(f) if f.durations.len() == u.phonemes.len() => f,
                _ => {
                    let clip = read_wav(&u.audio_path, config.sample_rate, policy)?;
                    let f = extractor.extract(&clip, &alignment)?;
                    write_features(&cached, &f, &hash)?;
                    f
                }
            };
            Ok(PreparedUtterance { utterance: u, features })
        })
        .collect()
}

/// Index of a prepared corpus, one row per utterance.
pub fn write_dataset(prepared: &[PreparedUtterance]) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for p in prepared {
        let u = &p.utterance;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            u.id,
            u.speaker_id,
            u.polarity,
            u.text,
            u.phonemes.join(" "),
            p.features.n_frames()
        ));
    }
    out
}

/// Loads a dataset index and the cached features it points at.
pub fn load_dataset(path: &Path, cache: &Path, expected_hash: Option<&str>) -> Result<Vec<PreparedUtterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::open(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DATASET_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {DATASET_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| Error::Parse { line: i + 1, message };
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns, found {}", cols.len())));
            }
            let polarity: EmotionPolarity = cols[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            let mut u = Utterance::new(cols[0], cols[1], polarity, cols[3]);
            u.phonemes = cols[4].split_whitespace().map(str::to_string).collect();
            let features = read_features(&feature_path(cache, &u.id), expected_hash)?;
            if features.durations.len() != u.phonemes.len() {
                return Err(bad(format!(
                    "{} phonemes but cached features carry {} durations",
                    u.phonemes.len(),
                    features.durations.len()
                )));
            }
            Ok(PreparedUtterance { utterance: u, features })
        })
        .collect()
}

/// Normalisation statistics over the per-phoneme targets of `prepared`.
pub fn variance_stats(prepared: &[&PreparedUtterance]) -> VarianceStats {
    let pitch: Vec<f64> = prepared.iter().flat_map(|p| p.features.phoneme_pitch()).collect();
    let energy: Vec<f64> = prepared.iter().flat_map(|p| p.features.phoneme_energy()).collect();
    VarianceStats::from_phonemes(&pitch, &energy)
}

pub fn to_example(p: &PreparedUtterance, phonemes: &SymbolTable, speakers: &SymbolTable) -> Result<Example> {
    let u = &p.utterance;
    let speaker = speakers
        .id(&u.speaker_id)
        .ok_or_else(|| Error::UnknownSpeaker(u.speaker_id.clone()))?;
    Ok(Example {
        phonemes: phonemes.encode(&u.phonemes)?,
        speaker,
        label: u.polarity.class_index(),
        durations: p.features.durations.clone(),
        pitch_hz: p.features.phoneme_pitch(),
        energy: p.features.phoneme_energy(),
        mel: p.features.mel.clone(),
    })
}

pub fn to_examples(
    prepared: &[&PreparedUtterance],
    phonemes: &SymbolTable,
    speakers: &SymbolTable,
) -> Result<Vec<Example>> {
    prepared.iter().map(|p| to_example(p, phonemes, speakers)).collect()
}
