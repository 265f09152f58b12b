//! Feature frontends: STFT, log-mel with global mean/variance
//! normalization, and spectro-temporal modulation features from learnable
//! Gabor STRF kernels.

pub mod container;
pub mod gmvn;
pub mod mel;
pub mod stft;
pub mod strf;

use thiserror::Error;

use crate::scalar::Real;

pub use container::{decode_features, encode_features, read_features, write_features, ContainerError};
pub use gmvn::{apply_gmvn, fit_gmvn, GmvnStats};
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, MelFilterbank, LOG_FLOOR};
pub use stft::{stft, Spectrogram, StftConfig};
pub use strf::{gabor_strf_kernel, stmf, strf_param_grad, StrfBank, StrfKernel};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio has {len} samples, shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("no frames to fit statistics on")]
    Empty,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// What a feature tensor holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LogMel,
    Stmf,
    Embedding,
    Gmvn,
}

impl FeatureKind {
    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::LogMel => 0,
            FeatureKind::Stmf => 1,
            FeatureKind::Embedding => 2,
            FeatureKind::Gmvn => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FeatureKind::LogMel,
            1 => FeatureKind::Stmf,
            2 => FeatureKind::Embedding,
            3 => FeatureKind::Gmvn,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::LogMel => "logmel",
            FeatureKind::Stmf => "stmf",
            FeatureKind::Embedding => "embedding",
            FeatureKind::Gmvn => "gmvn",
        }
    }
}

/// Channel-major feature tensor, `channels x frames x dim`, row-major.
/// Log-mel and embeddings have one channel; STMF has `2N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    pub kind: FeatureKind,
    pub channels: usize,
    pub frames: usize,
    pub dim: usize,
    /// Frames per second, or 0 where not meaningful.
    pub frame_rate: f64,
    pub data: Vec<T>,
}

impl<T: Real> FeatureSequence<T> {
    pub fn new(
        kind: FeatureKind,
        channels: usize,
        frames: usize,
        dim: usize,
        frame_rate: f64,
        data: Vec<T>,
    ) -> Result<Self, FeatureError> {
        if data.len() != channels * frames * dim {
            return Err(FeatureError::Shape {
                expected: format!("{channels}x{frames}x{dim}"),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite("feature tensor"));
        }
        Ok(Self {
            kind,
            channels,
            frames,
            dim,
            frame_rate,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.dim)
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, f: usize) -> T {
        self.data[(c * self.frames + t) * self.dim + f]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.frames * self.dim;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn scaled(&self, a: T) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * a).collect(),
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            kind: self.kind,
            channels: self.channels,
            frames: self.frames,
            dim: self.dim,
            frame_rate: self.frame_rate,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
