use num_complex::Complex;

use super::FeatureError;
use crate::audio::AudioBuffer;
use crate::dsp::{hann_periodic, FftPair};
use crate::scalar::Real;

/// Analysis geometry in samples: 25 ms window, 10 ms hop and a 512-point
/// DFT at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win: usize,
    pub hop: usize,
    pub dft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win: 400,
            hop: 160,
            dft: 512,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.dft / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            1 + (len - self.win) / self.hop
        }
    }
}

/// One-sided complex spectrogram, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub config: StftConfig,
    pub n_frames: usize,
    pub sample_rate: u32,
    pub bins: Vec<Complex<T>>,
}

impl<T: Real> Spectrogram<T> {
    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let n = self.n_bins();
        &self.bins[t * n..(t + 1) * n]
    }
}

/// Hann-windowed STFT without padding: `T = 1 + floor((len - win) / hop)`.
pub fn stft<T: Real>(audio: &AudioBuffer<T>, config: &StftConfig) -> Result<Spectrogram<T>, FeatureError> {
    if config.win == 0 || config.hop == 0 || config.win > config.dft {
        return Err(FeatureError::Geometry(format!(
            "win {} hop {} dft {}",
            config.win, config.hop, config.dft
        )));
    }
    let x = audio.samples();
    if x.len() < config.win {
        return Err(FeatureError::TooShort {
            len: x.len(),
            win: config.win,
        });
    }
    let window: Vec<T> = hann_periodic(config.win);
    let fft = FftPair::<T>::new(config.dft);
    let n_frames = config.frame_count(x.len());
    let n_bins = config.n_bins();
    let mut bins = Vec::with_capacity(n_frames * n_bins);
    let mut frame = vec![T::zero(); config.win];
    for t in 0..n_frames {
        let seg = &x[t * config.hop..t * config.hop + config.win];
        for ((f, &s), &w) in frame.iter_mut().zip(seg).zip(&window) {
            *f = s * w;
        }
        bins.extend_from_slice(&fft.forward_real(&frame)[..n_bins]);
    }
    Ok(Spectrogram {
        config: *config,
        n_frames,
        sample_rate: audio.sample_rate(),
        bins,
    })
}
