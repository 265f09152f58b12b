//! Pipeline configuration: one TOML document with a section per stage.
//! Every field has a default, so an empty file is a valid config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{CountryVocabulary, ManifestError, ManifestSchema};
use crate::features::StftConfig;
use crate::model::{ModelConfig, StrfLayerConfig, TrainConfig};
use crate::preprocess::{DenoiseConfig, VadConfig, DEFAULT_HIGHPASS_TAPS, DEFAULT_STOPBAND_HZ};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vocabulary(#[from] ManifestError),
}

/// Which feature representation the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frontend {
    /// Normalized log-mel spectrogram.
    Logmel,
    /// Normalized log-mel passed through a learnable STRF layer.
    Strf,
    /// Seeded random-projection embeddings of the log-mel frames.
    Embed,
    /// Precomputed embedding files supplied from outside.
    External,
}

impl Frontend {
    pub fn as_str(self) -> &'static str {
        match self {
            Frontend::Logmel => "logmel",
            Frontend::Strf => "strf",
            Frontend::Embed => "embed",
            Frontend::External => "external",
        }
    }
}

impl fmt::Display for Frontend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frontend {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logmel" => Ok(Frontend::Logmel),
            "strf" => Ok(Frontend::Strf),
            "embed" => Ok(Frontend::Embed),
            "external" => Ok(Frontend::External),
            other => Err(ConfigError::Invalid(format!(
                "unknown frontend `{other}` (expected logmel, strf, embed or external)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSettings {
    pub sample_rate: u32,
    pub highpass: bool,
    pub stopband_hz: f64,
    pub highpass_taps: usize,
    pub denoise: bool,
    pub vad_trim: bool,
    pub target_peak: f64,
    /// Extra speed-perturbed copies of every training clip.
    pub speed_factors: Vec<f64>,
    pub denoiser: DenoiseConfig,
    pub vad: VadConfig,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            highpass: true,
            stopband_hz: DEFAULT_STOPBAND_HZ,
            highpass_taps: DEFAULT_HIGHPASS_TAPS,
            denoise: true,
            vad_trim: true,
            target_peak: 0.9,
            speed_factors: Vec::new(),
            denoiser: DenoiseConfig::default(),
            vad: VadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSettings {
    pub frontend: Frontend,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper mel edge; Nyquist when absent.
    pub fmax_hz: Option<f64>,
    pub win: usize,
    pub hop: usize,
    pub dft: usize,
    pub embed_dim: usize,
    /// Directory of `<id>.vbft` embedding files for the external frontend.
    pub external_dir: Option<PathBuf>,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            frontend: Frontend::Logmel,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: None,
            win: stft.win,
            hop: stft.hop,
            dft: stft.dft,
            embed_dim: crate::embeddings::DEFAULT_PSEUDO_DIM,
            external_dir: None,
        }
    }
}

impl FeatureSettings {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            win: self.win,
            hop: self.hop,
            dft: self.dft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    pub grid_step: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self { grid_step: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSettings {
    /// Root for stage outputs; the environment variable wins when set.
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub countries: Vec<String>,
    pub n_emotions: usize,
    pub paths: PathSettings,
    pub synth: SynthConfig,
    pub preprocess: PreprocessSettings,
    pub features: FeatureSettings,
    pub strf: StrfLayerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            countries: synth.countries.clone(),
            n_emotions: synth.n_emotions,
            paths: PathSettings::default(),
            synth,
            preprocess: PreprocessSettings::default(),
            features: FeatureSettings::default(),
            strf: StrfLayerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.schema()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a seed override to every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Seeds and label geometry propagated from the top-level fields.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone().with_seed(self.seed);
        c.synth.countries = self.countries.clone();
        c.synth.n_emotions = self.n_emotions;
        c.model.n_countries = self.countries.len();
        c.model.n_emotions = self.n_emotions;
        c
    }

    pub fn schema(&self) -> Result<ManifestSchema, ConfigError> {
        if self.n_emotions == 0 {
            return Err(ConfigError::Invalid("n_emotions must be positive".into()));
        }
        Ok(ManifestSchema {
            vocabulary: CountryVocabulary::new(&self.countries)?,
            n_emotions: self.n_emotions,
        })
    }

    /// Hex SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.features.frontend = Frontend::Strf;
        cfg.train.steps = 7;
        cfg.preprocess.speed_factors = vec![0.9, 1.1];
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = PipelineConfig::from_toml(
            "seed = 5\n[features]\nfrontend = \"embed\"\n[train]\nsteps = 3\n[train.loss_weights]\nemotion = 40.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.features.frontend, Frontend::Embed);
        assert_eq!(cfg.features.n_mels, 80);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.loss_weights.emotion, 40.0);
        assert_eq!(cfg.train.loss_weights.country, 8.0);
    }

    #[test]
    fn bad_documents_rejected() {
        assert!(matches!(PipelineConfig::from_toml("seed = \"x\""), Err(ConfigError::Parse(_))));
        assert!(PipelineConfig::from_toml("countries = [\"A\", \"A\"]").is_err());
        assert!("mfcc".parse::<Frontend>().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = a.clone().with_seed(1);
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn resolved_propagates_seed_and_labels() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 9;
        cfg.countries = vec!["X".into(), "Y".into()];
        cfg.n_emotions = 3;
        let r = cfg.resolved();
        assert_eq!((r.synth.seed, r.model.seed, r.train.seed), (9, 9, 9));
        assert_eq!((r.model.n_countries, r.model.n_emotions), (2, 3));
        assert_eq!(r.synth.countries, cfg.countries);
    }
}
