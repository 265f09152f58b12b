//! Ephraim-Malah MMSE short-time spectral amplitude denoiser.
//!
//! Per frame and bin the a-posteriori SNR `gamma = |Y|^2 / noise` and the
//! decision-directed a-priori SNR `xi` drive the MMSE-STSA gain; the
//! enhanced magnitude is recombined with the noisy phase and resynthesized
//! by weighted overlap-add.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::bessel::{i0e, i1e};
use super::DspError;
use crate::audio::AudioBuffer;
use crate::dsp::{hann_periodic, ms_to_samples, FftPair};
use crate::scalar::Real;

/// Floor on the a-priori SNR, -25 dB.
pub const XI_FLOOR_DB: f64 = -25.0;
/// Floor on noise power.
pub const NOISE_FLOOR: f64 = 1e-12;
/// Above this `nu` the exact gain is replaced by its Wiener limit.
const NU_WIENER: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub dft_size: usize,
    /// Decision-directed smoothing constant.
    pub alpha_dd: f64,
    pub noise_init_frames: usize,
    /// Linear lower bound on the spectral gain.
    pub gain_floor: f64,
    /// Smoothing constant of the noise PSD update.
    pub noise_update_rate: f64,
    /// Frames whose mean a-posteriori SNR stays below this are treated as
    /// noise and fold into the noise estimate.
    pub noise_gamma_threshold: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            dft_size: 512,
            alpha_dd: 0.98,
            noise_init_frames: 6,
            gain_floor: 10f64.powf(-25.0 / 20.0),
            noise_update_rate: 0.98,
            noise_gamma_threshold: 2.0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |what: &str| Err(DspError::InvalidConfig(what.to_string()));
        if !(0.0..=1.0).contains(&self.alpha_dd) {
            return bad("alpha_dd must lie in [0, 1]");
        }
        if !(self.gain_floor > 0.0 && self.gain_floor <= 1.0) {
            return bad("gain_floor must lie in (0, 1]");
        }
        if self.noise_init_frames == 0 {
            return bad("noise_init_frames must be at least 1");
        }
        if !(self.frame_ms > 0.0 && self.hop_ms > 0.0 && self.hop_ms <= self.frame_ms) {
            return bad("frame and hop must be positive with hop <= frame");
        }
        if !(0.0..1.0).contains(&self.noise_update_rate) {
            return bad("noise_update_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Ephraim-Malah MMSE-STSA gain for a-priori SNR `xi` and a-posteriori SNR
/// `gamma`, clamped to `[gain_floor, 1]`.
///
/// `G = (sqrt(pi)/2) (sqrt(nu)/gamma) exp(-nu/2) [(1+nu) I0(nu/2) + nu I1(nu/2)]`
/// with `nu = xi gamma / (1 + xi)`. The exponential is folded into scaled
/// Bessel functions; for `nu > 700` the Wiener gain `xi/(1+xi)` is used.
pub fn mmse_gain<T: Real>(xi: T, gamma: T, gain_floor: T) -> T {
    let xi = xi.max(T::zero());
    let gamma = gamma.max(T::min_positive_value());
    let wiener = xi / (T::one() + xi);
    let nu = wiener * gamma;
    let raw = if nu > T::lit(NU_WIENER) {
        wiener
    } else {
        let half = nu / T::lit(2.0);
        T::PI().sqrt() / T::lit(2.0) * nu.sqrt() / gamma
            * ((T::one() + nu) * i0e(half) + nu * i1e(half))
    };
    raw.max(gain_floor).min(T::one())
}

/// Decision-directed a-priori SNR for one bin:
/// `alpha * prev/noise + (1 - alpha) * max(gamma - 1, 0)`, floored at -25 dB.
#[inline]
pub fn decision_directed_bin<T: Real>(prev_clean: T, noisy: T, noise: T, alpha: T) -> T {
    let gamma = noisy / noise;
    let ml = (gamma - T::one()).max(T::zero());
    let xi = alpha * prev_clean / noise + (T::one() - alpha) * ml;
    xi.max(T::lit(10f64.powf(XI_FLOOR_DB / 10.0)))
}

pub fn decision_directed_snr<T: Real>(
    prev_clean_power: &[T],
    noisy_power: &[T],
    noise_power: &[T],
    alpha_dd: T,
) -> Vec<T> {
    prev_clean_power
        .iter()
        .zip(noisy_power)
        .zip(noise_power)
        .map(|((&p, &y), &n)| decision_directed_bin(p, y, n, alpha_dd))
        .collect()
}

/// Running per-bin noise PSD: the mean of the leading frames, then
/// exponentially smoothed over frames judged noise-dominated.
#[derive(Debug, Clone)]
pub struct NoiseTracker<T> {
    psd: Vec<T>,
    rate: T,
    gamma_threshold: T,
}

impl<T: Real> NoiseTracker<T> {
    pub fn from_leading_frames(frames: &[Vec<T>], rate: T, gamma_threshold: T) -> Result<Self, DspError> {
        let first = frames.first().ok_or(DspError::EmptyInput)?;
        let mut psd = vec![T::zero(); first.len()];
        for f in frames {
            for (acc, &p) in psd.iter_mut().zip(f) {
                *acc += p;
            }
        }
        let n = T::from_usize_lossy(frames.len());
        let floor = T::lit(NOISE_FLOOR);
        for v in &mut psd {
            *v = (*v / n).max(floor);
        }
        Ok(Self {
            psd,
            rate,
            gamma_threshold,
        })
    }

    pub fn psd(&self) -> &[T] {
        &self.psd
    }

    /// Mean a-posteriori SNR of a frame against the current estimate.
    pub fn mean_gamma(&self, frame_power: &[T]) -> T {
        let total: T = frame_power
            .iter()
            .zip(&self.psd)
            .map(|(&p, &n)| p / n)
            .sum();
        total / T::from_usize_lossy(self.psd.len().max(1))
    }

    /// Folds a frame into the estimate if it looks like noise. Returns
    /// whether the estimate changed.
    pub fn observe(&mut self, frame_power: &[T]) -> bool {
        if self.mean_gamma(frame_power) >= self.gamma_threshold {
            return false;
        }
        let floor = T::lit(NOISE_FLOOR);
        for (n, &p) in self.psd.iter_mut().zip(frame_power) {
            *n = (self.rate * *n + (T::one() - self.rate) * p).max(floor);
        }
        true
    }
}

/// Noise PSD from `n_init` leading power frames, then tracked over the
/// remaining frames with the default update rule (rate 0.98, mean
/// a-posteriori SNR below 2).
pub fn estimate_noise_psd<T: Real>(
    noisy_power_frames: &[Vec<T>],
    n_init: usize,
) -> Result<Vec<T>, DspError> {
    if noisy_power_frames.is_empty() {
        return Err(DspError::EmptyInput);
    }
    if n_init == 0 || n_init > noisy_power_frames.len() {
        return Err(DspError::NotEnoughFrames {
            needed: n_init,
            available: noisy_power_frames.len(),
        });
    }
    let defaults = DenoiseConfig::default();
    let mut tracker = NoiseTracker::from_leading_frames(
        &noisy_power_frames[..n_init],
        T::lit(defaults.noise_update_rate),
        T::lit(defaults.noise_gamma_threshold),
    )?;
    for frame in &noisy_power_frames[n_init..] {
        tracker.observe(frame);
    }
    Ok(tracker.psd)
}

/// MMSE-STSA enhancement. Output length equals input length; buffers
/// shorter than one analysis frame are returned unchanged.
pub fn mmse_stsa_denoise<T: Real>(
    audio: &AudioBuffer<T>,
    config: &DenoiseConfig,
) -> Result<AudioBuffer<T>, DspError> {
    config.validate()?;
    let rate = audio.sample_rate();
    let win = ms_to_samples(config.frame_ms, rate);
    let hop = ms_to_samples(config.hop_ms, rate).max(1);
    if win > config.dft_size {
        return Err(DspError::InvalidConfig(format!(
            "frame of {win} samples exceeds dft size {}",
            config.dft_size
        )));
    }
    let x = audio.samples();
    if x.len() < win || win == 0 {
        return Ok(audio.clone());
    }

    // Frames tile the signal without padding; a final frame is aligned to
    // the end so the tail is covered.
    let mut starts: Vec<usize> = (0..=(x.len() - win) / hop).map(|m| m * hop).collect();
    if let Some(&last) = starts.last() {
        if last + win < x.len() {
            starts.push(x.len() - win);
        }
    }

    let window: Vec<T> = hann_periodic(win);
    let fft = FftPair::<T>::new(config.dft_size);
    let n_bins = config.dft_size / 2 + 1;
    let spectra: Vec<Vec<Complex<T>>> = starts
        .iter()
        .map(|&s| {
            let frame: Vec<T> = x[s..s + win]
                .iter()
                .zip(&window)
                .map(|(&v, &w)| v * w)
                .collect();
            fft.forward_real(&frame)
        })
        .collect();
    let power =
        |spec: &[Complex<T>]| -> Vec<T> { spec[..n_bins].iter().map(|c| c.norm_sqr()).collect() };

    let n_init = config.noise_init_frames.min(starts.len());
    let init_power: Vec<Vec<T>> = spectra[..n_init].iter().map(|s| power(s)).collect();
    let mut noise = NoiseTracker::from_leading_frames(
        &init_power,
        T::lit(config.noise_update_rate),
        T::lit(config.noise_gamma_threshold),
    )?;

    let alpha = T::lit(config.alpha_dd);
    let floor = T::lit(config.gain_floor);
    let mut prev_clean = vec![T::zero(); n_bins];
    let mut out = vec![T::zero(); x.len()];
    let mut norm = vec![T::zero(); x.len()];
    // broadband gain of the frame with the most window support per sample,
    // used where the summed window is too small to divide by
    let mut support = vec![(T::zero(), T::one()); x.len()];
    let mut gain = vec![T::zero(); n_bins];

    for (m, (spec, &start)) in spectra.into_iter().zip(&starts).enumerate() {
        let noisy = power(&spec);
        let psd = noise.psd();
        for b in 0..n_bins {
            let gamma = (noisy[b] / psd[b]).max(T::min_positive_value());
            let xi = decision_directed_bin(prev_clean[b], noisy[b], psd[b], alpha);
            gain[b] = mmse_gain(xi, gamma, floor);
            prev_clean[b] = gain[b] * gain[b] * noisy[b];
        }
        if m >= n_init {
            noise.observe(&noisy);
        }
        let in_energy: T = noisy.iter().copied().sum();
        let out_energy: T = prev_clean.iter().copied().sum();
        let broadband = if in_energy > T::zero() {
            (out_energy / in_energy).sqrt()
        } else {
            T::one()
        };

        let mut enhanced = spec;
        let n = config.dft_size;
        for b in 0..n_bins {
            enhanced[b] = enhanced[b] * gain[b];
            if b > 0 && b < n - b {
                enhanced[n - b] = enhanced[n - b] * gain[b];
            }
        }
        let frame = fft.inverse_real(enhanced);
        for i in 0..win {
            out[start + i] += frame[i];
            norm[start + i] += window[i];
            if window[i] > support[start + i].0 {
                support[start + i] = (window[i], broadband);
            }
        }
    }

    let min_norm = T::lit(1e-3);
    let samples = (0..x.len())
        .map(|i| {
            if norm[i] >= min_norm {
                out[i] / norm[i]
            } else {
                x[i] * support[i].1
            }
        })
        .collect();
    Ok(audio.with_samples(samples))
}
