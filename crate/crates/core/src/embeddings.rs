//! Externally computed frame embeddings, stored in the feature container
//! with the `embedding` kind tag, plus a seeded random-projection
//! generator that stands in for a pretrained encoder in tests.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::features::{
    decode_features, encode_features, ContainerError, FeatureError, FeatureKind, FeatureSequence,
};
use crate::fsutil::atomic_write;
use crate::scalar::Real;

/// `n_frames x dim` row-major matrix of frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T> {
    pub id: String,
    pub frames: Vec<T>,
    pub n_frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
}

impl<T: Real> EmbeddingSequence<T> {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<T>,
        n_frames: usize,
        dim: usize,
        frame_rate: f64,
    ) -> Result<Self, FeatureError> {
        if n_frames == 0 || dim == 0 {
            return Err(FeatureError::Empty);
        }
        if frames.len() != n_frames * dim {
            return Err(FeatureError::Shape {
                expected: format!("{n_frames}x{dim}"),
                got: format!("{} values", frames.len()),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite("embedding"));
        }
        Ok(Self {
            id: id.into(),
            frames,
            n_frames,
            dim,
            frame_rate,
        })
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

/// Wraps the matrix as a one-channel feature tensor; values are untouched.
pub fn embeddings_as_features<T: Real>(seq: &EmbeddingSequence<T>) -> FeatureSequence<T> {
    FeatureSequence {
        kind: FeatureKind::Embedding,
        channels: 1,
        frames: seq.n_frames,
        dim: seq.dim,
        frame_rate: seq.frame_rate,
        data: seq.frames.clone(),
    }
}

pub fn encode_embeddings<T: Real>(seq: &EmbeddingSequence<T>) -> Vec<u8> {
    encode_features(&embeddings_as_features(seq))
}

pub fn decode_embeddings<T: Real>(id: &str, bytes: &[u8]) -> Result<EmbeddingSequence<T>, ContainerError> {
    let f: FeatureSequence<T> = decode_features(bytes)?;
    if f.kind != FeatureKind::Embedding || f.channels != 1 {
        return Err(ContainerError::WrongKind {
            expected: FeatureKind::Embedding.name(),
            found: f.kind.name(),
        });
    }
    Ok(EmbeddingSequence {
        id: id.to_string(),
        frames: f.data,
        n_frames: f.frames,
        dim: f.dim,
        frame_rate: f.frame_rate,
    })
}

pub fn write_embeddings<T: Real>(path: &Path, seq: &EmbeddingSequence<T>) -> Result<(), ContainerError> {
    atomic_write(path, &encode_embeddings(seq))?;
    Ok(())
}

/// Reads one file; the utterance id is the file stem.
pub fn read_embeddings<T: Real>(path: &Path) -> Result<EmbeddingSequence<T>, ContainerError> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_embeddings(&id, &std::fs::read(path)?)
}

/// Fixed random projection from `input_dim` features to `dim` outputs,
/// squashed by `tanh`. The matrix depends only on the seed, so every
/// utterance of a dataset lands in the same space.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEmbedder<T> {
    pub input_dim: usize,
    pub dim: usize,
    weights: Vec<T>,
}

pub const DEFAULT_PSEUDO_DIM: usize = 256;

impl<T: Real> PseudoEmbedder<T> {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Result<Self, FeatureError> {
        if input_dim == 0 || dim == 0 {
            return Err(FeatureError::Geometry("projection dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..input_dim * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * scale)
            })
            .collect();
        Ok(Self {
            input_dim,
            dim,
            weights,
        })
    }

    pub fn embed(&self, id: &str, input: &FeatureSequence<T>) -> Result<EmbeddingSequence<T>, FeatureError> {
        if input.channels != 1 || input.dim != self.input_dim {
            return Err(FeatureError::Shape {
                expected: format!("1x?x{}", self.input_dim),
                got: format!("{}x{}x{}", input.channels, input.frames, input.dim),
            });
        }
        let mut frames = Vec::with_capacity(input.frames * self.dim);
        for t in 0..input.frames {
            let x = &input.data[t * input.dim..(t + 1) * input.dim];
            for row in self.weights.chunks_exact(self.input_dim) {
                let s: T = row.iter().zip(x).map(|(&w, &v)| w * v).sum();
                frames.push(s.tanh());
            }
        }
        EmbeddingSequence::new(id, frames, input.frames, self.dim, input.frame_rate)
    }
}
