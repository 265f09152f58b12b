use super::{FeatureError, FeatureKind, FeatureSequence};
use crate::scalar::Real;

pub const VAR_FLOOR: f64 = 1e-8;

/// Per-channel mean and (population) variance over a set of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct GmvnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> GmvnStats<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats as a `2 x dim` tensor (mean row, variance row) for storage.
    pub fn to_features(&self) -> FeatureSequence<T> {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.var);
        FeatureSequence::new(FeatureKind::Gmvn, 1, 2, self.dim(), 0.0, data)
            .expect("stats are finite")
    }

    pub fn from_features(seq: &FeatureSequence<T>) -> Result<Self, FeatureError> {
        if seq.kind != FeatureKind::Gmvn || seq.channels != 1 || seq.frames != 2 {
            return Err(FeatureError::Shape {
                expected: "gmvn 2 x dim".into(),
                got: format!("{} {:?}", seq.kind.name(), seq.shape()),
            });
        }
        Ok(Self {
            mean: seq.data[..seq.dim].to_vec(),
            var: seq.data[seq.dim..].to_vec(),
        })
    }
}

/// Fits statistics over every frame of every sequence.
pub fn fit_gmvn<T: Real>(sequences: &[&FeatureSequence<T>]) -> Result<GmvnStats<T>, FeatureError> {
    let first = sequences.first().ok_or(FeatureError::Empty)?;
    let dim = first.dim;
    let mut count = 0usize;
    let mut sum = vec![T::zero(); dim];
    for seq in sequences {
        if seq.dim != dim || seq.channels != 1 {
            return Err(FeatureError::Shape {
                expected: format!("1 x T x {dim}"),
                got: format!("{:?}", seq.shape()),
            });
        }
        for row in seq.data.chunks_exact(dim) {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        count += seq.frames;
    }
    if count < 2 {
        return Err(FeatureError::Empty);
    }
    let n = T::from_usize_lossy(count);
    let mean: Vec<T> = sum.into_iter().map(|s| s / n).collect();
    let mut sq = vec![T::zero(); dim];
    for seq in sequences {
        for row in seq.data.chunks_exact(dim) {
            for ((acc, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let floor = T::lit(VAR_FLOOR);
    let var = sq.into_iter().map(|s| (s / n).max(floor)).collect();
    Ok(GmvnStats { mean, var })
}

pub fn apply_gmvn<T: Real>(
    features: &FeatureSequence<T>,
    stats: &GmvnStats<T>,
) -> Result<FeatureSequence<T>, FeatureError> {
    if features.dim != stats.dim() {
        return Err(FeatureError::Shape {
            expected: format!("dim {}", stats.dim()),
            got: format!("dim {}", features.dim),
        });
    }
    let inv_std: Vec<T> = stats.var.iter().map(|v| T::one() / v.sqrt()).collect();
    let data = features
        .data
        .chunks_exact(features.dim)
        .flat_map(|row| {
            row.iter()
                .zip(&stats.mean)
                .zip(&inv_std)
                .map(|((&v, &m), &s)| (v - m) * s)
        })
        .collect();
    Ok(FeatureSequence {
        data,
        ..features.clone()
    })
}
