//! Cleanup chain applied to raw clips before feature extraction. Every
//! stage is a pure function of its input and config.

mod bessel;
pub mod denoise;
pub mod fir;
pub mod vad;

use thiserror::Error;

use crate::audio::{resample_by_ratio, AudioBuffer};
use crate::scalar::Real;

pub use denoise::{
    decision_directed_snr, estimate_noise_psd, mmse_gain, mmse_stsa_denoise, DenoiseConfig,
    NoiseTracker,
};
pub use fir::{apply_fir, design_highpass_fir, FirFilter, DEFAULT_HIGHPASS_TAPS, DEFAULT_STOPBAND_HZ};
pub use vad::{energy_vad, trim_to_voiced, VadConfig};

pub const SPEED_RANGE: (f64, f64) = (0.8, 1.25);

#[derive(Debug, Error)]
pub enum DspError {
    #[error("FIR tap count must be odd, got {0}")]
    EvenTaps(usize),
    #[error("FIR needs at least 63 taps, got {0}")]
    TooFewTaps(usize),
    #[error("stopband {stopband_hz} Hz is not below Nyquist for fs = {fs} Hz")]
    StopbandAboveNyquist { stopband_hz: f64, fs: f64 },
    #[error("target peak {0} outside (0, 1]")]
    BadTargetPeak(f64),
    #[error("speed factor {0} outside [0.8, 1.25]")]
    SpeedOutOfRange(f64),
    #[error("no frames to process")]
    EmptyInput,
    #[error("need {needed} frames, only {available} available")]
    NotEnoughFrames { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Scales so that the largest magnitude equals `target_peak`.
pub fn gain_normalize<T: Real>(audio: &AudioBuffer<T>, target_peak: T) -> Result<AudioBuffer<T>, DspError> {
    if !(target_peak > T::zero() && target_peak <= T::one()) {
        return Err(DspError::BadTargetPeak(target_peak.as_f64()));
    }
    let peak = audio
        .samples()
        .iter()
        .fold(T::zero(), |m, s| m.max(s.abs()));
    if peak == T::zero() || peak == target_peak {
        return Ok(audio.clone());
    }
    let scale = target_peak / peak;
    Ok(audio.with_samples(audio.samples().iter().map(|&s| s * scale).collect()))
}

/// Plays the clip `factor` times faster: duration scales by `1/factor`,
/// pitch shifts with it, and the nominal rate is unchanged.
pub fn speed_perturb<T: Real>(audio: &AudioBuffer<T>, factor: f64) -> Result<AudioBuffer<T>, DspError> {
    if !(SPEED_RANGE.0..=SPEED_RANGE.1).contains(&factor) {
        return Err(DspError::SpeedOutOfRange(factor));
    }
    if factor == 1.0 {
        return Ok(audio.clone());
    }
    Ok(resample_by_ratio(audio, 1.0 / factor, audio.sample_rate()))
}
