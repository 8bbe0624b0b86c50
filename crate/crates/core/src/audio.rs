//! Mono audio buffers and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// How to treat WAV files that are not mono at the target rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavPolicy {
    #[default]
    Reject,
    /// Average channels and linearly resample to the target rate.
    Convert,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Linear-interpolation resampling.
    pub fn resampled(&self, target_rate: u32) -> Self {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Self {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let k = (pos.floor() as usize).min(last);
                let frac = pos - k as f64;
                let next = self.samples[(k + 1).min(last)];
                self.samples[k] * (1.0 - frac) + next * frac
            })
            .collect();
        Self {
            samples,
            sample_rate: target_rate,
        }
    }
}

pub fn read_wav(path: &Path, target_rate: u32, policy: WavPolicy) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::open(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    if policy == WavPolicy::Reject {
        if channels != 1 {
            return Err(Error::Audio(format!(
                "{}: {channels} channels, expected mono",
                path.display()
            )));
        }
        if spec.sample_rate != target_rate {
            return Err(Error::Audio(format!(
                "{}: sample rate {} Hz, expected {target_rate} Hz",
                path.display(),
                spec.sample_rate
            )));
        }
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels.max(1))
        .map(|frame| frame.iter().sum::<f64>() / frame.len() as f64)
        .collect();
    Ok(AudioClip::new(mono, spec.sample_rate)?.resampled(target_rate))
}

/// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Duration from the WAV header alone.
pub fn wav_duration_s(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::open(path, io),
        other => Error::Wav(other),
    })?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}
