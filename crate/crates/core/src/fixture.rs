//! Deterministic synthetic corpora of tone-and-noise "speech" with exact
//! alignments and polarity-dependent prosody.
//!
//! Each label scales every phoneme duration (-1: x1.2, -0.5: x1.1, 0: x1.0,
//! 0.5: x0.9, 1: x0.8) and tilts the F0 contour across the utterance (rising
//! for positive labels, falling for negative ones). Optionally every text
//! carries one marker word whose onset phoneme identifies the label.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, DEFAULT_SAMPLE_RATE};
use crate::corpus::{serialize_alignment, write_manifest, AlignmentEntry, AlignmentRecord, EmotionPolarity, Utterance};
use crate::error::{Error, Result};

pub const HOP: usize = 256;
const ORDINARY_ONSETS: [&str; 8] = ["b", "d", "g", "m", "n", "l", "s", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const NASAL_CODAS: [&str; 8] = ["ban", "den", "gin", "mun", "lan", "son", "shen", "nin"];
/// Marker onset per label, ascending polarity.
pub const MARKER_ONSETS: [&str; 5] = ["k", "t", "p", "x", "h"];

/// Duration multiplier for a label.
pub fn duration_factor(p: EmotionPolarity) -> f64 {
    match p {
        EmotionPolarity::StrongNegative => 1.2,
        EmotionPolarity::SlightNegative => 1.1,
        EmotionPolarity::Neutral => 1.0,
        EmotionPolarity::SlightPositive => 0.9,
        EmotionPolarity::StrongPositive => 0.8,
    }
}

pub fn marker_word(p: EmotionPolarity) -> String {
    format!("{}a", MARKER_ONSETS[p.class_index()])
}

/// Word to phoneme lexicon: onset+vowel syllables, a few with a nasal coda,
/// and the five marker words.
pub fn toy_lexicon() -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    for c in ORDINARY_ONSETS {
        for v in VOWELS {
            out.push((format!("{c}{v}"), vec![c.to_string(), v.to_string()]));
        }
    }
    for w in NASAL_CODAS {
        let onset = w.trim_end_matches(|ch| "aeiou".contains(ch) || ch == 'n');
        let onset = if onset.is_empty() { "n" } else { onset };
        let vowel = &w[onset.len()..w.len() - 1];
        out.push((
            w.to_string(),
            vec![onset.to_string(), vowel.to_string(), "n".to_string()],
        ));
    }
    for p in EmotionPolarity::ALL {
        out.push((
            marker_word(p),
            vec![MARKER_ONSETS[p.class_index()].to_string(), "a".to_string()],
        ));
    }
    out
}

pub fn lexicon_tsv() -> String {
    let mut s = String::from("word\tphonemes\n");
    for (w, p) in toy_lexicon() {
        let _ = writeln!(s, "{w}\t{}", p.join(" "));
    }
    s
}

enum Kind {
    Vowel,
    Sonorant,
    Stop,
    Fricative,
}

fn kind(ph: &str) -> Kind {
    match ph {
        "a" | "e" | "i" | "o" | "u" => Kind::Vowel,
        "m" | "n" | "l" => Kind::Sonorant,
        "b" | "d" | "g" | "k" | "t" | "p" => Kind::Stop,
        _ => Kind::Fricative,
    }
}

/// Unscaled duration in frames.
pub fn base_frames(ph: &str) -> f64 {
    match kind(ph) {
        Kind::Vowel => 9.0,
        Kind::Sonorant => 4.0,
        Kind::Stop => 3.0,
        Kind::Fricative => 5.0,
    }
}

pub fn phoneme_frames(ph: &str, p: EmotionPolarity) -> usize {
    ((base_frames(ph) * duration_factor(p)).round() as usize).max(1)
}

/// Formant pair and base F0 of a voiced phoneme.
fn voice(ph: &str) -> Option<(f64, f64, f64)> {
    Some(match ph {
        "a" => (800.0, 1200.0, 150.0),
        "e" => (500.0, 1800.0, 160.0),
        "i" => (300.0, 2300.0, 180.0),
        "o" => (500.0, 900.0, 140.0),
        "u" => (350.0, 700.0, 130.0),
        "m" | "n" => (280.0, 1100.0, 125.0),
        "l" => (380.0, 1300.0, 125.0),
        _ => return None,
    })
}

/// F0 multiplier at relative position `u` in [0, 1].
pub fn contour(p: EmotionPolarity, u: f64) -> f64 {
    1.0 + 0.2 * p.value() * (2.0 * u - 1.0)
}

/// Renders a phoneme sequence with the given per-phoneme frame counts.
pub fn render(phonemes: &[String], frames: &[usize], polarity: EmotionPolarity, seed: u64) -> AudioClip {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let total: usize = frames.iter().sum::<usize>() * HOP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; total];
    let mut phase = 0.0f64;
    let mut start = 0;
    for (ph, &f) in phonemes.iter().zip(frames) {
        let n = f * HOP;
        let ramp = (n / 8).max(1);
        let fade = |i: usize| {
            let a = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
            0.5 - 0.5 * (std::f64::consts::PI * a).cos()
        };
        match voice(ph) {
            Some((f1, f2, f0)) => {
                let gain = if matches!(kind(ph), Kind::Vowel) { 0.5 } else { 0.25 };
                for i in 0..n {
                    let u = (start + i) as f64 / total as f64;
                    let hz = f0 * contour(polarity, u);
                    phase += 2.0 * std::f64::consts::PI * hz / sr;
                    let mut s = 0.0;
                    let mut norm = 0.0;
                    let mut k = 1;
                    while k as f64 * hz < 4000.0 {
                        let h = k as f64 * hz;
                        let a = (-0.5 * ((h - f1) / 150.0).powi(2)).exp()
                            + (-0.5 * ((h - f2) / 200.0).powi(2)).exp()
                            + 0.05;
                        s += a * (k as f64 * phase).sin();
                        norm += a;
                        k += 1;
                    }
                    samples[start + i] = gain * fade(i) * s / norm;
                }
            }
            None => {
                let (alpha, gain) = match ph.as_str() {
                    "s" => (0.95, 0.12),
                    "sh" => (0.7, 0.12),
                    "x" => (0.5, 0.1),
                    "h" => (-0.5, 0.08),
                    _ => (0.3, 0.15),
                };
                let mut prev = 0.0;
                for i in 0..n {
                    let w: f64 = rng.random_range(-1.0..1.0);
                    samples[start + i] = gain * fade(i) * (w - alpha * prev);
                    prev = w;
                }
            }
        }
        start += n;
    }
    AudioClip::new(samples, DEFAULT_SAMPLE_RATE).expect("finite synthetic audio")
}

/// One generated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureUtterance {
    pub utterance: Utterance,
    pub alignment: AlignmentRecord,
    pub clip: AudioClip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub per_label: usize,
    pub seed: u64,
    pub markers: bool,
    pub words: (usize, usize),
    pub probe_texts: usize,
}

impl FixtureSpec {
    /// The 20-utterance corpus bundled under `fixtures/toy`.
    pub fn bundled() -> Self {
        Self {
            per_label: 4,
            seed: 20,
            markers: true,
            words: (3, 4),
            probe_texts: 20,
        }
    }

    /// Larger corpus for classifier training.
    pub fn classifier() -> Self {
        Self {
            per_label: 12,
            seed: 60,
            markers: true,
            words: (2, 4),
            probe_texts: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub utterances: Vec<FixtureUtterance>,
    /// Marker-free texts that appear in no training utterance.
    pub probe_texts: Vec<String>,
}

fn ordinary_words() -> Vec<String> {
    let markers: Vec<String> = EmotionPolarity::ALL.iter().map(|&p| marker_word(p)).collect();
    toy_lexicon()
        .into_iter()
        .map(|(w, _)| w)
        .filter(|w| !markers.contains(w))
        .collect()
}

pub fn generate(spec: &FixtureSpec) -> Fixture {
    let lexicon = toy_lexicon();
    let words = ordinary_words();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut draw_text = |rng: &mut ChaCha8Rng, marker: Option<String>| loop {
        let n = rng.random_range(spec.words.0..=spec.words.1);
        let mut ws: Vec<String> = (0..n).map(|_| words.choose(rng).expect("words").clone()).collect();
        if let Some(m) = &marker {
            let at = rng.random_range(0..=ws.len());
            ws.insert(at, m.clone());
        }
        let text = ws.join(" ");
        if seen.insert(text.clone()) {
            return text;
        }
    };
    let mut labels: Vec<EmotionPolarity> = EmotionPolarity::ALL
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p, spec.per_label))
        .collect();
    labels.shuffle(&mut rng);
    let mut utterances = Vec::with_capacity(labels.len());
    for (i, &p) in labels.iter().enumerate() {
        let text = draw_text(&mut rng, spec.markers.then(|| marker_word(p)));
        let phonemes: Vec<String> = text
            .split_whitespace()
            .flat_map(|w| lexicon.iter().find(|(x, _)| x == w).expect("lexicon word").1.clone())
            .collect();
        let frames: Vec<usize> = phonemes.iter().map(|ph| phoneme_frames(ph, p)).collect();
        let id = format!("toy{i:03}");
        let clip = render(&phonemes, &frames, p, spec.seed.wrapping_mul(1000) + i as u64);
        let mut end = 0usize;
        let entries = phonemes
            .iter()
            .zip(&frames)
            .map(|(ph, &f)| {
                let start = end;
                end += f;
                AlignmentEntry {
                    phoneme: ph.clone(),
                    start_s: round6((start * HOP) as f64 / DEFAULT_SAMPLE_RATE as f64),
                    end_s: round6((end * HOP) as f64 / DEFAULT_SAMPLE_RATE as f64),
                }
            })
            .collect();
        let alignment = AlignmentRecord::new(entries).expect("monotone synthetic alignment");
        let mut utterance = Utterance::new(&id, "spk0", p, text);
        utterance.phonemes = phonemes;
        utterances.push(FixtureUtterance {
            utterance,
            alignment,
            clip,
        });
    }
    let probe_texts = (0..spec.probe_texts).map(|_| draw_text(&mut rng, None)).collect();
    Fixture {
        utterances,
        probe_texts,
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl Fixture {
    pub fn manifest(&self) -> String {
        let utts: Vec<Utterance> = self.utterances.iter().map(|u| u.utterance.clone()).collect();
        write_manifest(&utts)
    }

    /// Writes `manifest.tsv`, `lexicon.tsv`, `probe.txt`, `align/<id>.align.tsv` and `wav/<id>.wav`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e| Error::io(p.display().to_string(), e);
        for sub in ["align", "wav"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        }
        let mut probe = self.probe_texts.join("\n");
        if !probe.is_empty() {
            probe.push('\n');
        }
        for (name, body) in [
            ("manifest.tsv", self.manifest()),
            ("lexicon.tsv", lexicon_tsv()),
            ("probe.txt", probe),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io(&p, e))?;
        }
        for u in &self.utterances {
            let p = dir.join("align").join(format!("{}.align.tsv", u.utterance.id));
            fs::write(&p, serialize_alignment(&u.alignment)).map_err(|e| io(&p, e))?;
            write_wav(&dir.join("wav").join(format!("{}.wav", u.utterance.id)), &u.clip)?;
        }
        Ok(())
    }
}

/// Location of the bundled 20-utterance corpus.
pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("toy")
}
