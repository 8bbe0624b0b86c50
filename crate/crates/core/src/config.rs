//! Model and training hyperparameters, read from flat `key = value` files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// Encoder output after the FFT blocks.
    #[default]
    Encoder,
    /// Phoneme embeddings plus positions, before the encoder.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub conv_kernels: [usize; 2],
    pub conv_filter: usize,
    pub predictor_kernel: usize,
    pub predictor_filter: usize,
    pub predictor_dropout: f64,
    pub n_mels: usize,
    /// Filled from the corpus when zero.
    pub n_speakers: usize,
    pub n_pitch_bins: usize,
    pub n_energy_bins: usize,
    /// Filled from the corpus when zero.
    pub phoneme_vocab_size: usize,
    pub classifier_channels: [usize; 3],
    pub classifier_input: ClassifierInput,
    pub classifier_stop_gradient: bool,
    pub use_energy: bool,
    pub use_speaker_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            conv_kernels: [9, 1],
            conv_filter: 1024,
            predictor_kernel: 3,
            predictor_filter: 256,
            predictor_dropout: 0.5,
            n_mels: 80,
            n_speakers: 1,
            n_pitch_bins: 256,
            n_energy_bins: 256,
            phoneme_vocab_size: 0,
            classifier_channels: [64, 128, 256],
            classifier_input: ClassifierInput::Encoder,
            classifier_stop_gradient: false,
            use_energy: true,
            use_speaker_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("conv_filter", self.conv_filter),
            ("predictor_kernel", self.predictor_kernel),
            ("predictor_filter", self.predictor_filter),
            ("n_mels", self.n_mels),
            ("n_speakers", self.n_speakers),
            ("n_pitch_bins", self.n_pitch_bins),
            ("n_energy_bins", self.n_energy_bins),
            ("phoneme_vocab_size", self.phoneme_vocab_size),
            ("conv_kernels[0]", self.conv_kernels[0]),
            ("conv_kernels[1]", self.conv_kernels[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classifier_channels.contains(&0) {
            return Err(Error::Config("classifier_channels must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, k) in [
            ("conv_kernels[0]", self.conv_kernels[0]),
            ("conv_kernels[1]", self.conv_kernels[1]),
            ("predictor_kernel", self.predictor_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd for same padding, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.predictor_dropout) {
            return Err(Error::Config("predictor_dropout must lie in [0, 1)".into()));
        }
        if self.n_pitch_bins < 2 {
            return Err(Error::Config(
                "n_pitch_bins must be at least 2 (bin 0 is unvoiced)".into(),
            ));
        }
        Ok(())
    }

    /// Flat `key = value` rendering, the same format [`RunConfig::parse`] reads.
    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable list of fields that differ.
    pub fn diff(&self, other: &ModelConfig) -> String {
        let a: toml::Table = toml::from_str(&self.to_kv()).expect("round trip");
        let b: toml::Table = toml::from_str(&other.to_kv()).expect("round trip");
        let mut out = String::new();
        for (k, va) in &a {
            if b.get(k) != Some(va) {
                let vb = b.get(k).map_or_else(|| "<missing>".to_string(), ToString::to_string);
                let _ = write!(out, "{}{k}: {va} vs {vb}", if out.is_empty() { "" } else { "; " });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emotion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            duration: 1.0,
            pitch: 1.0,
            energy: 1.0,
            emotion: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// Multiplier on the warmup/inverse-sqrt schedule.
    pub lr_scale: f64,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    /// Inverse-frequency class weights in the emotion cross-entropy.
    pub balance_emotion_classes: bool,
    pub n_val: usize,
    pub n_test: usize,
    pub stratified_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 4000,
            lr_scale: 1.0,
            max_steps: 100_000,
            checkpoint_every: 10_000,
            log_every: 100,
            seed: 1234,
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            balance_emotion_classes: false,
            n_val: 100,
            n_test: 100,
            stratified_split: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything a `train` run reads from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

impl RunConfig {
    /// Parses a config file. Keys may be flat (`d_model = 64`) or grouped under
    /// `[model]` / `[train]`; flat keys are routed by name. Feature settings
    /// live only under `[features]`.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let model_keys: toml::Table = toml::from_str(&ModelConfig::default().to_kv()).expect("defaults");
        let mut model = toml::Table::new();
        let mut train = toml::Table::new();
        let mut features = toml::Table::new();
        for (k, v) in table {
            match (k.as_str(), v) {
                ("model", toml::Value::Table(t)) => model.extend(t),
                ("train", toml::Value::Table(t)) => train.extend(t),
                ("features", toml::Value::Table(t)) => features.extend(t),
                (_, v) if model_keys.contains_key(&k) => {
                    model.insert(k, v);
                }
                (_, v) => {
                    train.insert(k, v);
                }
            }
        }
        let model: ModelConfig = toml::Value::Table(model)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train: TrainConfig = toml::Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        train.validate()?;
        let features: FeatureConfig = toml::Value::Table(features)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        features.validate()?;
        if features.n_mels != model.n_mels {
            return Err(Error::Config(format!(
                "features produce {} mel bands but the model expects {}",
                features.n_mels, model.n_mels
            )));
        }
        Ok(Self { model, train, features })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::open(path, e))?;
        Self::parse(&text)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::from("[model]\n");
        out.push_str(&self.model.to_kv());
        out.push_str("\n[train]\n");
        out.push_str(&toml::to_string(&self.train).expect("config serialises"));
        out.push_str("\n[features]\n");
        out.push_str(&toml::to_string(&self.features).expect("config serialises"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ModelConfig {
        ModelConfig {
            phoneme_vocab_size: 10,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let m = ModelConfig::default();
        assert_eq!(
            (m.d_model, m.n_heads, m.encoder_layers, m.decoder_layers),
            (256, 2, 4, 4)
        );
        assert_eq!((m.conv_kernels, m.conv_filter), ([9, 1], 1024));
        assert_eq!(
            (m.predictor_kernel, m.predictor_filter, m.predictor_dropout),
            (3, 256, 0.5)
        );
        assert_eq!(m.classifier_channels, [64, 128, 256]);
        let t = TrainConfig::default();
        assert_eq!(
            (t.batch_size, t.adam_beta1, t.adam_beta2, t.adam_eps),
            (16, 0.9, 0.98, 1e-9)
        );
        assert_eq!(t.warmup_steps, 4000);
    }

    #[test]
    fn validation() {
        assert!(valid().validate().is_ok());
        assert!(ModelConfig {
            d_model: 255,
            ..valid()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            conv_kernels: [8, 1],
            ..valid()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            phoneme_vocab_size: 0,
            ..valid()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn flat_file_parses_into_both_sections() {
        let cfg = RunConfig::parse(
            "d_model = 32\nn_heads = 2\nuse_energy = false\nclassifier_input = \"embedding\"\nbatch_size = 4\nwarmup_steps = 10\n\n[loss_weights]\nmel = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert!(!cfg.model.use_energy);
        assert_eq!(cfg.model.classifier_input, ClassifierInput::Embedding);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.loss_weights.mel, 2.0);
        assert!(RunConfig::parse("bogus_key = 1").is_err());
        assert_eq!(RunConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = valid();
        let b = ModelConfig {
            d_model: 128,
            ..valid()
        };
        assert_eq!(a.hash(), valid().hash());
        assert_ne!(a.hash(), b.hash());
        assert!(a.diff(&b).contains("d_model"));
    }
}
