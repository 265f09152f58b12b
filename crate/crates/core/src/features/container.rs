//! Binary feature container.
//!
//! Layout (little-endian): `"VBFT"`, version `u32`, kind `u8`, rank `u8`,
//! `rank` dimensions as `u32`, frame rate `f32`, then row-major `f32`
//! values.

use std::path::Path;

use thiserror::Error;

use super::{FeatureKind, FeatureSequence};
use crate::fsutil::atomic_write;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"VBFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("unknown kind tag {0}")]
    Kind(u8),
    #[error("unsupported rank {0}")]
    Rank(u8),
    #[error("zero-length dimension in header")]
    ZeroDim,
    #[error("truncated: header wants {expected} bytes of values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value in payload")]
    NonFinite,
    #[error("expected {expected} features, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_features<T: Real>(seq: &FeatureSequence<T>) -> Vec<u8> {
    let dims: Vec<usize> = if seq.kind == FeatureKind::Stmf || seq.channels != 1 {
        vec![seq.channels, seq.frames, seq.dim]
    } else {
        vec![seq.frames, seq.dim]
    };
    let mut out = Vec::with_capacity(14 + 4 * dims.len() + 4 * seq.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(seq.kind.tag());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(seq.frame_rate as f32).to_le_bytes());
    for v in &seq.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated {
                expected: n,
                found: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_features<T: Real>(bytes: &[u8]) -> Result<FeatureSequence<T>, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(|_| ContainerError::BadMagic)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let tag = cur.take(1)?[0];
    let kind = FeatureKind::from_tag(tag).ok_or(ContainerError::Kind(tag))?;
    let rank = cur.take(1)?[0];
    if !(2..=3).contains(&rank) {
        return Err(ContainerError::Rank(rank));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<Result<_, _>>()?;
    if dims.contains(&0) {
        return Err(ContainerError::ZeroDim);
    }
    let (channels, frames, dim) = match dims.as_slice() {
        [t, f] => (1, *t, *f),
        [c, t, f] => (*c, *t, *f),
        _ => unreachable!(),
    };
    let frame_rate = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
    let count = channels * frames * dim;
    let payload = &bytes[cur.pos..];
    if payload.len() != 4 * count {
        return Err(ContainerError::Truncated {
            expected: 4 * count,
            found: payload.len(),
        });
    }
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ContainerError::NonFinite);
    }
    Ok(FeatureSequence {
        kind,
        channels,
        frames,
        dim,
        frame_rate,
        data,
    })
}

pub fn write_features<T: Real>(path: &Path, seq: &FeatureSequence<T>) -> Result<(), ContainerError> {
    atomic_write(path, &encode_features(seq))?;
    Ok(())
}

pub fn read_features<T: Real>(path: &Path) -> Result<FeatureSequence<T>, ContainerError> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: FeatureKind, c: usize) -> FeatureSequence<f32> {
        let data = (0..c * 7 * 5).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        FeatureSequence::new(kind, c, 7, 5, 100.0, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for (kind, c) in [
            (FeatureKind::LogMel, 1),
            (FeatureKind::Stmf, 4),
            (FeatureKind::Embedding, 1),
        ] {
            let seq = sample(kind, c);
            let back: FeatureSequence<f32> = decode_features(&encode_features(&seq)).unwrap();
            assert_eq!(back.shape(), seq.shape());
            assert_eq!(back.kind, kind);
            assert!(back
                .data
                .iter()
                .zip(&seq.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_features(&sample(FeatureKind::LogMel, 1));
        assert_eq!(&bytes[..4], b"VBFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 7);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 22 + 4 * 35);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode_features(&sample(FeatureKind::LogMel, 1));
        assert!(matches!(decode_features::<f32>(b"RIFF1234"), Err(ContainerError::BadMagic)));
        assert!(matches!(decode_features::<f32>(b"VB"), Err(ContainerError::BadMagic)));
        assert!(matches!(
            decode_features::<f32>(&good[..good.len() - 3]),
            Err(ContainerError::Truncated { .. })
        ));
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(decode_features::<f32>(&v), Err(ContainerError::Version(9))));
        let mut k = good.clone();
        k[8] = 42;
        assert!(matches!(decode_features::<f32>(&k), Err(ContainerError::Kind(42))));
        let mut r = good.clone();
        r[9] = 5;
        assert!(matches!(decode_features::<f32>(&r), Err(ContainerError::Rank(5))));
        let mut z = good.clone();
        z[14..18].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_features::<f32>(&z), Err(ContainerError::ZeroDim)));
        let mut nan = good;
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features::<f32>(&nan), Err(ContainerError::NonFinite)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vbft");
        let seq = sample(FeatureKind::Stmf, 2);
        write_features(&path, &seq).unwrap();
        assert_eq!(read_features::<f32>(&path).unwrap(), seq);
    }
}
