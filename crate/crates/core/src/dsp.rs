//! Window functions and FFT plumbing shared by the denoiser and the STFT.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Periodic Hann window of length `n`.
pub fn hann_periodic<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let ph = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::lit(0.5 - 0.5 * ph.cos())
        })
        .collect()
}

/// Symmetric Hann window of length `n` (zero at both ends).
pub fn hann_symmetric<T: Real>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::one()];
    }
    (0..n)
        .map(|i| {
            let ph = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            T::lit(0.5 - 0.5 * ph.cos())
        })
        .collect()
}

/// Forward/inverse transform pair of one size.
pub struct FftPair<T: Real> {
    pub size: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> FftPair<T> {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    /// Zero-padded forward transform of a real frame.
    pub fn forward_real(&self, frame: &[T]) -> Vec<Complex<T>> {
        debug_assert!(frame.len() <= self.size);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.size];
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform scaled by `1/size`, returning real parts.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex<T>>) -> Vec<T> {
        self.inverse.process(&mut spectrum);
        let scale = T::one() / T::from_usize_lossy(self.size);
        spectrum.into_iter().map(|c| c.re * scale).collect()
    }
}

/// Rounds a duration in milliseconds to a whole number of samples.
pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}
