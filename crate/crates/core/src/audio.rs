//! Mono PCM audio buffers, WAV I/O and linear-interpolation resampling.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("expected mono audio, found {0} channels")]
    Multichannel(u16),
    #[error("unsupported encoding: format tag {tag}, {bits} bits per sample")]
    UnsupportedEncoding { tag: u16, bits: u16 },
    #[error("truncated WAV: {0}")]
    Truncated(&'static str),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono sample sequence with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![T::zero(); len], sample_rate).expect("zeros are finite")
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Replaces the samples, keeping the rate. Used by stages whose output
    /// is finite by construction.
    pub(crate) fn with_samples(&self, samples: Vec<T>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn cast<U: Real>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self
                .samples
                .iter()
                .map(|s| U::lit(s.as_f64()))
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Float32,
}

const TAG_PCM: u16 = 1;
const TAG_FLOAT: u16 = 3;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a mono PCM16 or float32 WAV image.
pub fn decode_wav<T: Real>(bytes: &[u8]) -> Result<AudioBuffer<T>, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(AudioError::Truncated("no data chunk"));
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(AudioError::Truncated("fmt chunk"));
            }
            format = Some((
                u16_at(bytes, body),
                u16_at(bytes, body + 2),
                u32_at(bytes, body + 4),
                u16_at(bytes, body + 14),
            ));
        } else if id == b"data" {
            let (tag, channels, rate, bits) = format.ok_or(AudioError::NotWav)?;
            if channels != 1 {
                return Err(AudioError::Multichannel(channels));
            }
            if body + size > bytes.len() {
                return Err(AudioError::Truncated("data chunk shorter than declared"));
            }
            let data = &bytes[body..body + size];
            let samples: Vec<T> = match (tag, bits) {
                (TAG_PCM, 16) => {
                    if size % 2 != 0 {
                        return Err(AudioError::Truncated("odd PCM16 byte count"));
                    }
                    data.chunks_exact(2)
                        .map(|c| {
                            T::lit(i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                        })
                        .collect()
                }
                (TAG_FLOAT, 32) => {
                    if size % 4 != 0 {
                        return Err(AudioError::Truncated("partial float32 sample"));
                    }
                    data.chunks_exact(4)
                        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                        .collect()
                }
                (tag, bits) => return Err(AudioError::UnsupportedEncoding { tag, bits }),
            };
            return AudioBuffer::new(samples, rate);
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
}

/// Encodes a buffer as a canonical 44-byte-header WAV image. Samples are
/// clipped to `[-1, 1]` before PCM16 quantization.
pub fn encode_wav<T: Real>(buffer: &AudioBuffer<T>, depth: BitDepth) -> Vec<u8> {
    let (tag, bits) = match depth {
        BitDepth::Pcm16 => (TAG_PCM, 16u16),
        BitDepth::Float32 => (TAG_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = buffer.len() * block as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate().to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate() * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in buffer.samples() {
        let s = s.as_f64().clamp(-1.0, 1.0);
        match depth {
            BitDepth::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            BitDepth::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    out
}

pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>, AudioError> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav<T: Real>(
    buffer: &AudioBuffer<T>,
    path: impl AsRef<Path>,
    depth: BitDepth,
) -> Result<(), AudioError> {
    atomic_write(path.as_ref(), &encode_wav(buffer, depth))?;
    Ok(())
}

/// Resamples by `ratio` (output rate / input rate) with linear
/// interpolation, labelling the result with `out_rate`. Output length is
/// `round(len * ratio)`.
pub(crate) fn resample_by_ratio<T: Real>(
    buffer: &AudioBuffer<T>,
    ratio: f64,
    out_rate: u32,
) -> AudioBuffer<T> {
    let x = buffer.samples();
    let out_len = (x.len() as f64 * ratio).round() as usize;
    if x.is_empty() {
        return AudioBuffer::silence(0, out_rate);
    }
    let last = x.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 / ratio;
            let idx = pos.floor() as usize;
            if idx >= last {
                return x[last];
            }
            let frac = T::lit(pos - idx as f64);
            x[idx] + (x[idx + 1] - x[idx]) * frac
        })
        .collect();
    AudioBuffer {
        samples,
        sample_rate: out_rate,
    }
}

pub fn resample_linear<T: Real>(
    buffer: &AudioBuffer<T>,
    target_rate: u32,
) -> Result<AudioBuffer<T>, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if target_rate == buffer.sample_rate() {
        return Ok(buffer.clone());
    }
    let ratio = target_rate as f64 / buffer.sample_rate() as f64;
    Ok(resample_by_ratio(buffer, ratio, target_rate))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Frequency of the largest DFT magnitude (excluding DC), by direct
    /// summation over integer-Hz bins when the buffer spans one second.
    pub(crate) fn dft_peak_hz(x: &[f64], rate: u32, max_hz: usize) -> f64 {
        let n = x.len() as f64;
        let mut best = (0.0, 0usize);
        for k in 1..=max_hz {
            // bin spacing rate/n; k indexes bins
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best.0 {
                best = (mag, k);
            }
        }
        best.1 as f64 * rate as f64 / n
    }

    fn sine(freq: f64, rate: u32, len: usize) -> AudioBuffer<f64> {
        let s = (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    #[test]
    fn pcm16_silence_and_min_value() {
        let silent = AudioBuffer::<f64>::silence(16000, 16000);
        let img = encode_wav(&silent, BitDepth::Pcm16);
        assert_eq!(img.len(), 44 + 32000);
        let back: AudioBuffer<f64> = decode_wav(&img).unwrap();
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate(), 16000);
        assert!(back.samples().iter().all(|&s| s == 0.0));

        let mut img = encode_wav(&AudioBuffer::<f64>::silence(1, 16000), BitDepth::Pcm16);
        img[44..46].copy_from_slice(&i16::MIN.to_le_bytes());
        let back: AudioBuffer<f64> = decode_wav(&img).unwrap();
        assert_eq!(back.samples()[0], -1.0);
    }

    #[test]
    fn rejects_stereo_and_garbage() {
        let mut img = encode_wav(&AudioBuffer::<f64>::silence(4, 8000), BitDepth::Pcm16);
        img[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            decode_wav::<f64>(&img),
            Err(AudioError::Multichannel(2))
        ));
        assert!(matches!(decode_wav::<f64>(b"OggS...."), Err(AudioError::NotWav)));

        let mut img = encode_wav(&AudioBuffer::<f64>::silence(4, 8000), BitDepth::Pcm16);
        img[34..36].copy_from_slice(&24u16.to_le_bytes());
        assert!(matches!(
            decode_wav::<f64>(&img),
            Err(AudioError::UnsupportedEncoding { tag: 1, bits: 24 })
        ));

        let img = encode_wav(&AudioBuffer::<f64>::silence(100, 8000), BitDepth::Pcm16);
        assert!(matches!(
            decode_wav::<f64>(&img[..100]),
            Err(AudioError::Truncated(_))
        ));
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let s: Vec<f64> = (0..257).map(|i| (((i as f32) * 0.37).sin() * 0.9) as f64).collect();
        let buf = AudioBuffer::new(s, 22050).unwrap();
        let back: AudioBuffer<f64> = decode_wav(&encode_wav(&buf, BitDepth::Float32)).unwrap();
        assert_eq!(back, buf);
    }

    #[test]
    fn pcm16_round_trip_within_quantization_step() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.013).sin() * 0.999).collect();
        let buf = AudioBuffer::new(s.clone(), 16000).unwrap();
        let back: AudioBuffer<f64> = decode_wav(&encode_wav(&buf, BitDepth::Pcm16)).unwrap();
        let worst = s
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "worst {worst}");
    }

    #[test]
    fn out_of_range_amplitude_is_clipped() {
        let buf = AudioBuffer::new(vec![1.5, -2.0], 16000).unwrap();
        let back: AudioBuffer<f64> = decode_wav(&encode_wav(&buf, BitDepth::Float32)).unwrap();
        assert_eq!(back.samples(), &[1.0, -1.0]);
        let back: AudioBuffer<f64> = decode_wav(&encode_wav(&buf, BitDepth::Pcm16)).unwrap();
        assert!((back.samples()[0] - 1.0).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let buf = AudioBuffer::new(vec![0.25f32, -0.5, 0.0], 16000).unwrap();
        write_wav(&buf, &path, BitDepth::Float32).unwrap();
        assert_eq!(read_wav::<f32>(&path).unwrap(), buf);
    }

    #[test]
    fn resample_identity_and_length() {
        let buf = sine(100.0, 16000, 16000);
        assert_eq!(resample_linear(&buf, 16000).unwrap(), buf);
        let down = resample_linear(&buf, 8000).unwrap();
        assert_eq!(down.len(), 8000);
        assert_eq!(down.sample_rate(), 8000);
        let empty = AudioBuffer::<f64>::silence(0, 16000);
        assert!(resample_linear(&empty, 8000).unwrap().is_empty());
        assert!(resample_linear(&buf, 0).is_err());
    }

    #[test]
    fn resampled_sine_keeps_its_frequency() {
        let down = resample_linear(&sine(100.0, 16000, 16000), 8000).unwrap();
        let peak = dft_peak_hz(down.samples(), 8000, 400);
        assert!((peak - 100.0).abs() < 1e-9, "peak {peak}");
    }
}
