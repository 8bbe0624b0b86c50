//! Corpus data model: polarity labels, manifests, alignments, splits and statistics.
//!
//! Manifests and alignments are UTF-8 TSV with a header row and `\n` line
//! endings:
//!
//! ```text
//! id      speaker polarity        text
//! u001    spk0    -0.5    你好
//! ```
//!
//! ```text
//! phoneme start_s end_s
//! n       0.000000        0.092880
//! i       0.092880        0.197370
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "id\tspeaker\tpolarity\ttext";
pub const ALIGNMENT_HEADER: &str = "phoneme\tstart_s\tend_s";

/// Slack allowed when comparing boundaries written with six decimals.
const BOUNDARY_TOLERANCE_S: f64 = 5e-7;

/// Five-point emotion polarity annotation, ordered from most negative to most positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmotionPolarity {
    StrongNegative,
    SlightNegative,
    Neutral,
    SlightPositive,
    StrongPositive,
}

impl EmotionPolarity {
    pub const ALL: [EmotionPolarity; 5] = [
        EmotionPolarity::StrongNegative,
        EmotionPolarity::SlightNegative,
        EmotionPolarity::Neutral,
        EmotionPolarity::SlightPositive,
        EmotionPolarity::StrongPositive,
    ];
    pub const COUNT: usize = 5;

    pub fn from_value(value: f64) -> Result<Self> {
        // Exact comparison: every admissible value is representable in binary.
        match value {
            -1.0 => Ok(Self::StrongNegative),
            -0.5 => Ok(Self::SlightNegative),
            0.0 => Ok(Self::Neutral),
            0.5 => Ok(Self::SlightPositive),
            1.0 => Ok(Self::StrongPositive),
            v => Err(Error::InvalidPolarity(v)),
        }
    }

    pub fn from_class_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::InvalidClassIndex(index))
    }

    pub fn value(self) -> f64 {
        match self {
            Self::StrongNegative => -1.0,
            Self::SlightNegative => -0.5,
            Self::Neutral => 0.0,
            Self::SlightPositive => 0.5,
            Self::StrongPositive => 1.0,
        }
    }

    pub fn class_index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EmotionPolarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl std::str::FromStr for EmotionPolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let value: f64 = s.trim().parse().map_err(|_| Error::Parse {
            line: 0,
            message: format!("polarity {s:?} is not a number"),
        })?;
        Self::from_value(value)
    }
}

/// Maps a raw polarity value to its class index (ascending-value order).
pub fn encode_polarity(value: f64) -> Result<usize> {
    EmotionPolarity::from_value(value).map(EmotionPolarity::class_index)
}

pub fn decode_polarity(index: usize) -> Result<f64> {
    EmotionPolarity::from_class_index(index).map(EmotionPolarity::value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub text: String,
    /// Empty until filled from an alignment or a lexicon.
    pub phonemes: Vec<String>,
    pub polarity: EmotionPolarity,
    pub audio_path: PathBuf,
    pub alignment_path: Option<PathBuf>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        polarity: EmotionPolarity,
        text: impl Into<String>,
    ) -> Self {
        let id = id.into();
        Self {
            audio_path: PathBuf::from(format!("{id}.wav")),
            id,
            speaker_id: speaker_id.into(),
            text: text.into(),
            phonemes: Vec::new(),
            polarity,
            alignment_path: None,
        }
    }

    /// Number of non-whitespace characters in the transcript.
    pub fn text_chars(&self) -> usize {
        self.text.chars().filter(|c| !c.is_whitespace()).count()
    }
}

/// Parses a manifest. Line numbers in errors are 1-based and count the header.
pub fn parse_manifest(input: &str) -> Result<Vec<Utterance>> {
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {MANIFEST_HEADER:?}, found {header:?}"),
            })
        }
        None => return Ok(Vec::new()),
    }

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (id, speaker, polarity, text) = (fields[0], fields[1], fields[2], fields[3]);
        if id.is_empty() || speaker.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty id or speaker".into(),
            });
        }
        let value: f64 = polarity.trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("polarity {polarity:?} is not a number"),
        })?;
        let polarity = EmotionPolarity::from_value(value).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some(&first) = seen.get(id) {
            return Err(Error::DuplicateId {
                id: id.to_string(),
                first,
                second: line,
            });
        }
        seen.insert(id.to_string(), line);
        out.push(Utterance::new(id, speaker, polarity, text));
    }
    Ok(out)
}

pub fn write_manifest(utterances: &[Utterance]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for u in utterances {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", u.id, u.speaker_id, u.polarity, u.text);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEntry {
    pub phoneme: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AlignmentRecord {
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentRecord {
    pub fn new(entries: Vec<AlignmentEntry>) -> Result<Self> {
        let record = Self { entries };
        record.validate()?;
        Ok(record)
    }

    /// Checks positive widths, a zero start, and contiguous boundaries.
    pub fn validate(&self) -> Result<()> {
        for (row, e) in self.entries.iter().enumerate() {
            if !(e.start_s.is_finite() && e.end_s.is_finite()) {
                return Err(Error::Alignment {
                    row,
                    message: "non-finite time".into(),
                });
            }
            if e.start_s >= e.end_s {
                return Err(Error::Alignment {
                    row,
                    message: format!("start {} is not before end {}", e.start_s, e.end_s),
                });
            }
            if row == 0 {
                if e.start_s.abs() > BOUNDARY_TOLERANCE_S {
                    return Err(Error::Alignment {
                        row,
                        message: format!("first interval starts at {} instead of 0", e.start_s),
                    });
                }
            } else {
                let prev_end = self.entries[row - 1].end_s;
                if (e.start_s - prev_end).abs() > BOUNDARY_TOLERANCE_S {
                    let what = if e.start_s < prev_end {
                        "overlaps"
                    } else {
                        "leaves a gap after"
                    };
                    return Err(Error::Alignment {
                        row,
                        message: format!(
                            "non-monotone boundary: start {} {what} previous end {prev_end}",
                            e.start_s
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn total_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.end_s)
    }

    pub fn phonemes(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.phoneme.clone()).collect()
    }

    /// Checks the symbols against a phoneme sequence, in order.
    pub fn check_phonemes(&self, phonemes: &[String]) -> Result<()> {
        if self.entries.len() != phonemes.len() {
            return Err(Error::Alignment {
                row: self.entries.len().min(phonemes.len()),
                message: format!("{} intervals for {} phonemes", self.entries.len(), phonemes.len()),
            });
        }
        for (row, (e, p)) in self.entries.iter().zip(phonemes).enumerate() {
            if &e.phoneme != p {
                return Err(Error::Alignment {
                    row,
                    message: format!("phoneme {:?} does not match {:?}", e.phoneme, p),
                });
            }
        }
        Ok(())
    }
}

/// Parses `phoneme<TAB>start_s<TAB>end_s` rows. A header row is optional.
pub fn parse_alignment(input: &str) -> Result<AlignmentRecord> {
    let mut entries = Vec::new();
    let mut rows = input
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .peekable();
    if rows.peek() == Some(&ALIGNMENT_HEADER) {
        rows.next();
    }
    for (row, line) in rows.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Alignment {
                row,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let time = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Alignment {
                row,
                message: format!("time {s:?} is not a number"),
            })
        };
        entries.push(AlignmentEntry {
            phoneme: fields[0].to_string(),
            start_s: time(fields[1])?,
            end_s: time(fields[2])?,
        });
    }
    AlignmentRecord::new(entries)
}

pub fn serialize_alignment(record: &AlignmentRecord) -> String {
    let mut out = String::from(ALIGNMENT_HEADER);
    out.push('\n');
    for e in &record.entries {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}", e.phoneme, e.start_s, e.end_s);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Shuffle everything, then slice.
    #[default]
    Random,
    /// Allocate validation/test slots per polarity in proportion to class size.
    Stratified,
}

#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Splits a corpus into (train, val, test), deterministically for a given seed.
pub fn split_corpus(utterances: &[Utterance], seed: u64, n_val: usize, n_test: usize) -> Result<CorpusSplit> {
    split_corpus_with(utterances, seed, n_val, n_test, SplitStrategy::Random)
}

pub fn split_corpus_with(
    utterances: &[Utterance],
    seed: u64,
    n_val: usize,
    n_test: usize,
    strategy: SplitStrategy,
) -> Result<CorpusSplit> {
    let held_out = n_val + n_test;
    if utterances.len() <= held_out {
        return Err(Error::CorpusTooSmall {
            needed: held_out,
            got: utterances.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(&mut rng);

    let pick = |idx: &[usize]| idx.iter().map(|&i| utterances[i].clone()).collect::<Vec<_>>();
    match strategy {
        SplitStrategy::Random => Ok(CorpusSplit {
            val: pick(&order[..n_val]),
            test: pick(&order[n_val..held_out]),
            train: pick(&order[held_out..]),
        }),
        SplitStrategy::Stratified => {
            let mut by_class: BTreeMap<EmotionPolarity, Vec<usize>> = BTreeMap::new();
            for &i in &order {
                by_class.entry(utterances[i].polarity).or_default().push(i);
            }
            let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
            let val_quota = apportion(&sizes, n_val);
            let test_quota = apportion(&sizes, n_test);
            let (mut val, mut test, mut train) = (Vec::new(), Vec::new(), Vec::new());
            for (k, members) in by_class.values().enumerate() {
                let (v, t) = (val_quota[k], test_quota[k]);
                val.extend_from_slice(&members[..v]);
                test.extend_from_slice(&members[v..v + t]);
                train.extend_from_slice(&members[v + t..]);
            }
            // Restore shuffled order so class blocks do not leak into batching.
            let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();
            for part in [&mut val, &mut test, &mut train] {
                part.sort_by_key(|i| rank[i]);
            }
            Ok(CorpusSplit {
                train: pick(&train),
                val: pick(&val),
                test: pick(&test),
            })
        }
    }
}

/// Largest-remainder apportionment of `total` slots over classes of the given sizes,
/// never assigning a class more slots than it has members.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(k, &s)| (s * total % n, k)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quota.iter().sum::<usize>();
    while left > 0 {
        let mut progressed = false;
        for &(_, k) in &remainders {
            if left == 0 {
                break;
            }
            if quota[k] < sizes[k] {
                quota[k] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

/// Joint histogram of audio length and transcript length.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    pub audio_bin_s: f64,
    pub text_bin_chars: usize,
    /// `counts[audio_bin][text_bin]`; the last bin of each axis absorbs overflow.
    pub counts: Vec<Vec<usize>>,
}

impl JointHistogram {
    pub const AUDIO_BINS: usize = 12;
    pub const TEXT_BINS: usize = 16;

    fn new(audio_bin_s: f64, text_bin_chars: usize) -> Self {
        Self {
            audio_bin_s,
            text_bin_chars,
            counts: vec![vec![0; Self::TEXT_BINS]; Self::AUDIO_BINS],
        }
    }

    fn add(&mut self, audio_s: f64, text_chars: usize) {
        let a = ((audio_s / self.audio_bin_s).floor().max(0.0) as usize).min(Self::AUDIO_BINS - 1);
        let t = (text_chars / self.text_bin_chars).min(Self::TEXT_BINS - 1);
        self.counts[a][t] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub polarity_counts: BTreeMap<EmotionPolarity, usize>,
    pub total: usize,
    /// `None` for an empty corpus or when durations are unavailable.
    pub mean_audio_s: Option<f64>,
    pub mean_text_chars: Option<f64>,
    pub joint_length_histogram: Option<JointHistogram>,
}

/// Computes polarity counts and length statistics. `durations_s`, when given,
/// must be parallel to `utterances`.
pub fn compute_stats(utterances: &[Utterance], durations_s: Option<&[f64]>) -> Result<CorpusStats> {
    if let Some(d) = durations_s {
        if d.len() != utterances.len() {
            return Err(Error::shape(
                "durations",
                format!("{} durations for {} utterances", d.len(), utterances.len()),
            ));
        }
    }
    let mut polarity_counts: BTreeMap<EmotionPolarity, usize> = EmotionPolarity::ALL.iter().map(|&p| (p, 0)).collect();
    for u in utterances {
        *polarity_counts.entry(u.polarity).or_default() += 1;
    }
    let total = utterances.len();
    let mean = |sum: f64| (total > 0).then(|| sum / total as f64);
    let mean_text_chars = mean(utterances.iter().map(|u| u.text_chars() as f64).sum());
    let (mean_audio_s, joint_length_histogram) = match durations_s {
        Some(d) => {
            let mut hist = JointHistogram::new(0.5, 2);
            for (u, &s) in utterances.iter().zip(d) {
                hist.add(s, u.text_chars());
            }
            (mean(d.iter().sum()), Some(hist))
        }
        None => (None, None),
    };
    Ok(CorpusStats {
        polarity_counts,
        total,
        mean_audio_s,
        mean_text_chars,
        joint_length_histogram,
    })
}

impl CorpusStats {
    /// Key-value report, one `key<TAB>value` per line; absent means print `absent`.
    pub fn report(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "total\t{}", self.total);
        for (p, c) in &self.polarity_counts {
            let _ = writeln!(out, "count[{p}]\t{c}");
        }
        let _ = writeln!(out, "mean_audio_s\t{}", fmt_opt(self.mean_audio_s));
        let _ = writeln!(out, "mean_text_chars\t{}", fmt_opt(self.mean_text_chars));
        if let Some(h) = &self.joint_length_histogram {
            let _ = writeln!(out, "histogram_audio_bin_s\t{}", h.audio_bin_s);
            let _ = writeln!(out, "histogram_text_bin_chars\t{}", h.text_bin_chars);
            for (a, row) in h.counts.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "histogram[{a}]\t{}", cells.join(","));
            }
        }
        out
    }
}
