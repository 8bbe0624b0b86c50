//! Lexicon-based grapheme-to-phoneme conversion, synthesis to mel/WAV/PNG
//! artifacts, and the spectrogram plot.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::audio::write_wav;
use crate::corpus::EmotionPolarity;
use crate::dataset::{SymbolTable, UNK};
use crate::error::{Error, Result};
use crate::features::{write_mel, FeatureConfig, GriffinLim};
use crate::model::{AcousticModel, Inference};
use crate::nn::ParamStore;
use crate::trainer::CheckpointMeta;

/// Word to phoneme-sequence table read from `word<TAB>ph1 ph2 ...` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
    longest: usize,
}

/// Phonemes for a text plus the number of spans that fell back to [`UNK`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct G2pOutput {
    pub phonemes: Vec<String>,
    pub unknown_spans: usize,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        let entries: HashMap<String, Vec<String>> = entries.into_iter().collect();
        let longest = entries.keys().map(|k| k.chars().count()).max().unwrap_or(0);
        Self { entries, longest }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line == "word\tphonemes") {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected word<TAB>phonemes".into(),
            })?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if word.is_empty() || phones.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty word or phoneme list".into(),
                });
            }
            entries.push((word.to_string(), phones));
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::open(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whole-text lookup first; otherwise each whitespace token is covered by
    /// greedy longest matches, and every maximal unmatched span becomes one [`UNK`].
    pub fn g2p(&self, text: &str) -> Result<G2pOutput> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Contract("cannot convert empty text to phonemes".into()));
        }
        if let Some(p) = self.entries.get(text) {
            return Ok(G2pOutput {
                phonemes: p.clone(),
                unknown_spans: 0,
            });
        }
        let mut phonemes = Vec::new();
        let mut unknown_spans = 0;
        for token in text.split_whitespace() {
            let chars: Vec<char> = token.chars().collect();
            let mut i = 0;
            let mut in_gap = false;
            while i < chars.len() {
                let hit = (i + 1..=chars.len().min(i + self.longest)).rev().find_map(|j| {
                    let piece: String = chars[i..j].iter().collect();
                    self.entries.get(&piece).map(|p| (j, p))
                });
                match hit {
                    Some((j, p)) => {
                        phonemes.extend(p.iter().cloned());
                        i = j;
                        in_gap = false;
                    }
                    None => {
                        if !in_gap {
                            phonemes.push(UNK.to_string());
                            unknown_spans += 1;
                            in_gap = true;
                        }
                        i += 1;
                    }
                }
            }
        }
        Ok(G2pOutput {
            phonemes,
            unknown_spans,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthesisInput {
    Text(String),
    Phonemes(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outputs {
    pub mel: bool,
    pub wav: bool,
    pub plot: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            mel: true,
            wav: true,
            plot: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub input: SynthesisInput,
    pub speaker: String,
    pub polarity: Option<EmotionPolarity>,
    /// When set, the plot gains a second panel synthesised with this polarity.
    pub compare: Option<EmotionPolarity>,
    pub outputs: Outputs,
}

impl SynthesisRequest {
    /// Exactly one of `text` and `phonemes` must be given.
    pub fn new(
        text: Option<String>,
        phonemes: Option<String>,
        speaker: impl Into<String>,
        polarity: Option<EmotionPolarity>,
    ) -> Result<Self> {
        let input = match (text, phonemes) {
            (Some(t), None) => SynthesisInput::Text(t),
            (None, Some(p)) => SynthesisInput::Phonemes(p.split_whitespace().map(str::to_string).collect()),
            _ => return Err(Error::Contract("give exactly one of text or phonemes".into())),
        };
        Ok(Self {
            input,
            speaker: speaker.into(),
            polarity,
            compare: None,
            outputs: Outputs::default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisReport {
    pub label: EmotionPolarity,
    pub forced: bool,
    pub total_frames: usize,
    pub unknown_spans: usize,
    pub phonemes: Vec<String>,
    pub inference: Inference,
    pub compared: Option<Inference>,
    pub written: Vec<PathBuf>,
}

impl SynthesisReport {
    pub const TSV_HEADER: &'static str = "label\tsource\ttotal_frames";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.label,
            if self.forced { "forced" } else { "predicted" },
            self.total_frames
        )
    }
}

/// A loaded model with the symbol tables it was trained with.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub model: AcousticModel,
    pub params: ParamStore,
    pub phonemes: SymbolTable,
    pub speakers: SymbolTable,
    pub features: FeatureConfig,
}

impl Synthesizer {
    pub fn new(model: AcousticModel, params: ParamStore, meta: &CheckpointMeta) -> Result<Self> {
        let phonemes = SymbolTable::new(meta.phonemes.clone())?;
        if phonemes.len() != model.config.phoneme_vocab_size {
            return Err(Error::Checkpoint(format!(
                "{} stored phonemes for a vocabulary of {}",
                phonemes.len(),
                model.config.phoneme_vocab_size
            )));
        }
        Ok(Self {
            model,
            params,
            phonemes,
            speakers: SymbolTable::new(meta.speakers.clone())?,
            features: meta.features.clone().unwrap_or_default(),
        })
    }

    fn resolve(&self, request: &SynthesisRequest, lexicon: Option<&Lexicon>) -> Result<(Vec<String>, usize)> {
        match &request.input {
            SynthesisInput::Text(t) => {
                let lex = lexicon.ok_or_else(|| Error::Config("text input needs a lexicon".into()))?;
                let g = lex.g2p(t)?;
                Ok((g.phonemes, g.unknown_spans))
            }
            SynthesisInput::Phonemes(p) => {
                if p.is_empty() {
                    return Err(Error::Contract("empty phoneme sequence".into()));
                }
                Ok((p.clone(), 0))
            }
        }
    }

    pub fn speaker_index(&self, speaker: &str) -> Result<usize> {
        self.speakers.id(speaker).ok_or_else(|| {
            Error::UnknownSpeaker(format!(
                "{speaker:?}; known speakers: {}",
                self.speakers.symbols().join(", ")
            ))
        })
    }

    /// Runs the model; `unknown_spans` also counts phoneme symbols outside the vocabulary.
    pub fn run(&self, request: &SynthesisRequest, lexicon: Option<&Lexicon>) -> Result<SynthesisReport> {
        let speaker = self.speaker_index(&request.speaker)?;
        let (phonemes, mut unknown_spans) = self.resolve(request, lexicon)?;
        unknown_spans += phonemes
            .iter()
            .filter(|p| p.as_str() != UNK && self.phonemes.id(p).is_none())
            .count();
        let ids = self.phonemes.encode(&phonemes)?;
        let inference = self.model.synthesize(&self.params, &ids, speaker, request.polarity)?;
        let compared = request
            .compare
            .map(|p| self.model.synthesize(&self.params, &ids, speaker, Some(p)))
            .transpose()?;
        let label = EmotionPolarity::from_class_index(inference.label)?;
        Ok(SynthesisReport {
            label,
            forced: request.polarity.is_some(),
            total_frames: inference.durations.iter().sum(),
            unknown_spans,
            phonemes,
            inference,
            compared,
            written: Vec::new(),
        })
    }

    /// Runs the model and writes `<name>.mel`, `<name>.wav` and `<name>.png` as requested.
    pub fn synthesize(
        &self,
        request: &SynthesisRequest,
        lexicon: Option<&Lexicon>,
        out_dir: &Path,
        name: &str,
    ) -> Result<SynthesisReport> {
        let mut report = self.run(request, lexicon)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let mel = &report.inference.mel;
        if request.outputs.mel {
            let p = out_dir.join(format!("{name}.mel"));
            write_mel(&p, mel)?;
            report.written.push(p);
        }
        if request.outputs.wav {
            let p = out_dir.join(format!("{name}.wav"));
            let clip = GriffinLim::new(self.features.clone())?.reconstruct(mel)?;
            write_wav(&p, &clip)?;
            report.written.push(p);
        }
        if request.outputs.plot {
            let p = out_dir.join(format!("{name}.png"));
            let runs: Vec<&Inference> = std::iter::once(&report.inference).chain(&report.compared).collect();
            let contours: Vec<Vec<f64>> = runs.iter().map(|r| frame_pitch(&r.pitch_hz, &r.durations)).collect();
            let panels: Vec<PlotPanel> = runs
                .iter()
                .zip(&contours)
                .map(|(r, c)| PlotPanel {
                    mel: &r.mel,
                    pitch_hz: c,
                })
                .collect();
            render_plot(&panels)?.save(&p)?;
            report.written.push(p);
        }
        Ok(report)
    }
}

/// Expands a per-phoneme pitch plan to frames.
pub fn frame_pitch(pitch_hz: &[f64], durations: &[usize]) -> Vec<f64> {
    pitch_hz
        .iter()
        .zip(durations)
        .flat_map(|(&hz, &d)| std::iter::repeat_n(hz, d))
        .collect()
}

pub struct PlotPanel<'a> {
    pub mel: &'a Array2<f64>,
    pub pitch_hz: &'a [f64],
}

const PX_PER_FRAME: u32 = 4;
const PX_PER_BAND: u32 = 3;
const PITCH_RANGE_HZ: (f64, f64) = (50.0, 400.0);

fn colour(t: f64) -> Rgb<u8> {
    // Dark blue to yellow through teal.
    const STOPS: [[f64; 3]; 4] = [
        [20.0, 10.0, 60.0],
        [40.0, 90.0, 140.0],
        [60.0, 170.0, 120.0],
        [250.0, 230.0, 40.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Stacked spectrogram panels (low bands at the bottom) with the pitch
/// contour drawn over each in red, on a fixed 50-400 Hz axis.
pub fn render_plot(panels: &[PlotPanel]) -> Result<RgbImage> {
    let frames = panels.iter().map(|p| p.mel.nrows()).max().unwrap_or(0);
    let bands = panels.first().map_or(0, |p| p.mel.ncols());
    if frames == 0 || bands == 0 || panels.iter().any(|p| p.mel.ncols() != bands) {
        return Err(Error::shape("plot", "panels need frames and a common band count"));
    }
    let (w, ph) = (frames as u32 * PX_PER_FRAME, bands as u32 * PX_PER_BAND);
    let gap = 4;
    let h = ph * panels.len() as u32 + gap * (panels.len() as u32 - 1);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (k, panel) in panels.iter().enumerate() {
        let top = k as u32 * (ph + gap);
        let lo = panel.mel.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = panel.mel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for ((t, b), &v) in panel.mel.indexed_iter() {
            let c = colour((v - lo) / span);
            let y0 = top + ph - (b as u32 + 1) * PX_PER_BAND;
            for dy in 0..PX_PER_BAND {
                for dx in 0..PX_PER_FRAME {
                    img.put_pixel(t as u32 * PX_PER_FRAME + dx, y0 + dy, c);
                }
            }
        }
        let y_of = |hz: f64| {
            let f = ((hz - PITCH_RANGE_HZ.0) / (PITCH_RANGE_HZ.1 - PITCH_RANGE_HZ.0)).clamp(0.0, 1.0);
            top + ((1.0 - f) * (ph - 1) as f64).round() as u32
        };
        let mut prev: Option<(u32, u32)> = None;
        for (t, &hz) in panel.pitch_hz.iter().enumerate().take(frames) {
            if hz <= 0.0 {
                prev = None;
                continue;
            }
            let x = t as u32 * PX_PER_FRAME + PX_PER_FRAME / 2;
            let y = y_of(hz);
            let (x0, y0) = prev.unwrap_or((x, y));
            let steps = x.abs_diff(x0).max(y.abs_diff(y0)).max(1);
            for s in 0..=steps {
                let xi = x0 as f64 + (x as f64 - x0 as f64) * s as f64 / steps as f64;
                let yi = y0 as f64 + (y as f64 - y0 as f64) * s as f64 / steps as f64;
                for dy in 0..2 {
                    let yy = (yi.round() as u32 + dy).min(top + ph - 1);
                    img.put_pixel((xi.round() as u32).min(w - 1), yy, Rgb([230, 30, 30]));
                }
            }
            prev = Some((x, y));
        }
    }
    Ok(img)
}
