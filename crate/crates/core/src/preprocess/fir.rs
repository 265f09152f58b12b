//! Linear-phase highpass FIR design and same-length filtering.

use num_complex::Complex;

use super::DspError;
use crate::audio::AudioBuffer;
use crate::dsp::{hann_symmetric, FftPair};
use crate::scalar::Real;

pub const MIN_TAPS: usize = 63;
pub const DEFAULT_HIGHPASS_TAPS: usize = 1025;
pub const DEFAULT_STOPBAND_HZ: f64 = 20.0;

/// Normalized transition width of a Hann-windowed sinc, in cycles/sample
/// times the tap count.
const HANN_TRANSITION: f64 = 3.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter<T> {
    taps: Vec<T>,
    /// Cutoff (transition midpoint) of the prototype lowpass, Hz.
    pub cutoff_hz: f64,
    pub transition_hz: f64,
}

impl<T: Real> FirFilter<T> {
    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// |H(f)| evaluated by direct summation.
    pub fn magnitude_at(&self, freq_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, h)| {
                let h = h.as_f64();
                (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin())
            });
        (re * re + im * im).sqrt()
    }
}

/// Hann-windowed sinc highpass obtained by spectral inversion of a lowpass
/// whose cutoff sits in the middle of the transition band starting at
/// `stopband_hz`.
pub fn design_highpass_fir<T: Real>(
    stopband_hz: f64,
    fs: f64,
    num_taps: usize,
) -> Result<FirFilter<T>, DspError> {
    if num_taps % 2 == 0 {
        return Err(DspError::EvenTaps(num_taps));
    }
    if num_taps < MIN_TAPS {
        return Err(DspError::TooFewTaps(num_taps));
    }
    let nyquist = fs / 2.0;
    if !(stopband_hz >= 0.0) || stopband_hz >= nyquist {
        return Err(DspError::StopbandAboveNyquist { stopband_hz, fs });
    }
    let transition_hz = HANN_TRANSITION * fs / num_taps as f64;
    let cutoff_hz = stopband_hz + transition_hz / 2.0;
    if cutoff_hz >= nyquist {
        return Err(DspError::StopbandAboveNyquist { stopband_hz, fs });
    }
    let fc = cutoff_hz / fs;
    let mid = (num_taps - 1) / 2;
    let window: Vec<f64> = hann_symmetric(num_taps);

    let mut lowpass = vec![0.0f64; num_taps];
    for n in 0..=mid {
        let k = n as f64 - mid as f64;
        let sinc = if k == 0.0 {
            2.0 * fc
        } else {
            (2.0 * std::f64::consts::PI * fc * k).sin() / (std::f64::consts::PI * k)
        };
        lowpass[n] = sinc * window[n];
        lowpass[num_taps - 1 - n] = lowpass[n];
    }
    let dc: f64 = lowpass.iter().sum();
    let mut taps: Vec<f64> = lowpass.iter().map(|h| -h / dc).collect();
    taps[mid] += 1.0;

    Ok(FirFilter {
        taps: taps.into_iter().map(T::lit).collect(),
        cutoff_hz,
        transition_hz,
    })
}

/// Zero-padded linear convolution with the group delay removed, so the
/// output has the input's length and alignment.
pub fn apply_fir<T: Real>(filter: &FirFilter<T>, audio: &AudioBuffer<T>) -> AudioBuffer<T> {
    let x = audio.samples();
    if x.is_empty() {
        return audio.clone();
    }
    let h = filter.taps();
    let full = x.len() + h.len() - 1;
    let fft = FftPair::<T>::new(full.next_power_of_two());
    let xs = fft.forward_real(x);
    let hs = fft.forward_real(h);
    let prod: Vec<Complex<T>> = xs.iter().zip(&hs).map(|(a, b)| a * b).collect();
    let conv = fft.inverse_real(prod);
    let delay = filter.group_delay();
    audio.with_samples(conv[delay..delay + x.len()].to_vec())
}
