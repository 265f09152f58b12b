use super::{FeatureError, FeatureKind, FeatureSequence};
use crate::scalar::Real;

pub const DEFAULT_TIME_TAPS: usize = 32;
pub const DEFAULT_FREQ_TAPS: usize = 16;
pub const DEFAULT_FILTERS: usize = 8;
pub const DEFAULT_HOP_SECONDS: f64 = 0.01;

/// Learnable Gabor filterbank: one (rate, scale) pair per filter over a
/// fixed kernel extent. Rates are in Hz, scales in cycles per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StrfBank<T> {
    pub rates: Vec<T>,
    pub scales: Vec<T>,
    pub time_taps: usize,
    pub freq_taps: usize,
    pub hop_seconds: f64,
}

impl<T: Real> StrfBank<T> {
    pub fn new(
        rates: Vec<T>,
        scales: Vec<T>,
        time_taps: usize,
        freq_taps: usize,
        hop_seconds: f64,
    ) -> Result<Self, FeatureError> {
        if rates.is_empty() || rates.len() != scales.len() {
            return Err(FeatureError::Geometry(format!(
                "{} rates vs {} scales",
                rates.len(),
                scales.len()
            )));
        }
        if time_taps < 2 || freq_taps < 2 || !(hop_seconds > 0.0) {
            return Err(FeatureError::Geometry(format!(
                "kernel {time_taps}x{freq_taps}, hop {hop_seconds} s"
            )));
        }
        if rates.iter().chain(&scales).any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite("strf parameters"));
        }
        Ok(Self {
            rates,
            scales,
            time_taps,
            freq_taps,
            hop_seconds,
        })
    }

    /// Rates log-spaced over [2, 32] Hz and scales over [0.06, 0.5]
    /// cycles per channel.
    pub fn log_spaced(
        n_filters: usize,
        time_taps: usize,
        freq_taps: usize,
        hop_seconds: f64,
    ) -> Result<Self, FeatureError> {
        let spread = |lo: f64, hi: f64| -> Vec<T> {
            (0..n_filters)
                .map(|i| {
                    let u = if n_filters == 1 {
                        0.5
                    } else {
                        i as f64 / (n_filters - 1) as f64
                    };
                    T::lit(lo * (hi / lo).powf(u))
                })
                .collect()
        };
        Self::new(
            spread(2.0, 32.0),
            spread(0.06, 0.5),
            time_taps,
            freq_taps,
            hop_seconds,
        )
    }

    pub fn default_bank() -> Self {
        Self::log_spaced(
            DEFAULT_FILTERS,
            DEFAULT_TIME_TAPS,
            DEFAULT_FREQ_TAPS,
            DEFAULT_HOP_SECONDS,
        )
        .expect("default geometry is valid")
    }

    pub fn n_filters(&self) -> usize {
        self.rates.len()
    }

    pub fn kernel(&self, i: usize) -> StrfKernel<T> {
        gabor_strf_kernel(
            self.rates[i],
            self.scales[i],
            self.time_taps,
            self.freq_taps,
            self.hop_seconds,
        )
    }
}

/// Complex kernel split into real and imaginary planes, `time_taps x
/// freq_taps` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StrfKernel<T> {
    pub time_taps: usize,
    pub freq_taps: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
    /// Centred time offset of each row, in seconds.
    time_offsets: Vec<T>,
    /// Centred channel offset of each column.
    freq_offsets: Vec<T>,
}

impl<T: Real> StrfKernel<T> {
    pub fn norm(&self) -> T {
        self.re
            .iter()
            .chain(&self.im)
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Chain rule from kernel-plane gradients to (d rate, d scale).
    ///
    /// The envelope norm does not depend on rate or scale, so the
    /// normalization contributes no extra term.
    pub fn param_grad(&self, grad_re: &[T], grad_im: &[T]) -> (T, T) {
        let two_pi = T::TAU();
        let (mut d_rate, mut d_scale) = (T::zero(), T::zero());
        for a in 0..self.time_taps {
            let tc = self.time_offsets[a];
            for b in 0..self.freq_taps {
                let i = a * self.freq_taps + b;
                // d(re + j im)/dθ = j 2π c (re + j im)
                let g = grad_im[i] * self.re[i] - grad_re[i] * self.im[i];
                d_rate += two_pi * tc * g;
                d_scale += two_pi * self.freq_offsets[b] * g;
            }
        }
        (d_rate, d_scale)
    }
}

fn interior_hann<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let s = (T::PI() * T::from_usize_lossy(i + 1) / T::from_usize_lossy(n + 1)).sin();
            s * s
        })
        .collect()
}

fn centred<T: Real>(n: usize, step: T) -> Vec<T> {
    let mid = T::from_usize_lossy(n - 1) / T::lit(2.0);
    (0..n)
        .map(|i| (T::from_usize_lossy(i) - mid) * step)
        .collect()
}

/// Hann-enveloped complex exponential with unit L2 norm.
pub fn gabor_strf_kernel<T: Real>(
    rate: T,
    scale: T,
    time_taps: usize,
    freq_taps: usize,
    hop_seconds: f64,
) -> StrfKernel<T> {
    let ht: Vec<T> = interior_hann(time_taps);
    let hf: Vec<T> = interior_hann(freq_taps);
    let time_offsets = centred(time_taps, T::lit(hop_seconds));
    let freq_offsets = centred(freq_taps, T::one());
    let energy: T = ht.iter().map(|&v| v * v).sum::<T>() * hf.iter().map(|&v| v * v).sum::<T>();
    let inv_norm = T::one() / energy.sqrt();
    let n = time_taps * freq_taps;
    let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for a in 0..time_taps {
        for b in 0..freq_taps {
            let env = ht[a] * hf[b] * inv_norm;
            let phase = T::TAU() * (rate * time_offsets[a] + scale * freq_offsets[b]);
            re.push(env * phase.cos());
            im.push(env * phase.sin());
        }
    }
    StrfKernel {
        time_taps,
        freq_taps,
        re,
        im,
        time_offsets,
        freq_offsets,
    }
}

/// Column range `f` for which `f + off` lies inside `0..cols`.
#[inline]
fn valid_cols(cols: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (cols as isize - off).clamp(0, cols as isize) as usize;
    (lo, hi.max(lo))
}

/// Same-size zero-padded cross-correlation of `x` (`rows x cols`) with a
/// complex kernel, accumulated into `out_re` and `out_im`.
pub(crate) fn correlate_same<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    k: &StrfKernel<T>,
    out_re: &mut [T],
    out_im: &mut [T],
) {
    let (ca, cb) = ((k.time_taps - 1) / 2, (k.freq_taps - 1) / 2);
    for t in 0..rows {
        let dst = t * cols;
        for a in 0..k.time_taps {
            let src = t as isize + a as isize - ca as isize;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let src = src as usize * cols;
            for b in 0..k.freq_taps {
                let off = b as isize - cb as isize;
                let (lo, hi) = valid_cols(cols, off);
                let (wr, wi) = (k.re[a * k.freq_taps + b], k.im[a * k.freq_taps + b]);
                let xs = &x[(src as isize + lo as isize + off) as usize..(src as isize + hi as isize + off) as usize];
                for ((r, i), &v) in out_re[dst + lo..dst + hi]
                    .iter_mut()
                    .zip(&mut out_im[dst + lo..dst + hi])
                    .zip(xs)
                {
                    *r += wr * v;
                    *i += wi * v;
                }
            }
        }
    }
}

/// Gradient of `Σ up_re·out_re + up_im·out_im` with respect to the kernel
/// planes, where `out = correlate_same(x, k)`.
pub(crate) fn kernel_grad<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    time_taps: usize,
    freq_taps: usize,
    up_re: &[T],
    up_im: &[T],
) -> (Vec<T>, Vec<T>) {
    let (ca, cb) = ((time_taps - 1) / 2, (freq_taps - 1) / 2);
    let mut g_re = vec![T::zero(); time_taps * freq_taps];
    let mut g_im = vec![T::zero(); time_taps * freq_taps];
    for t in 0..rows {
        let dst = t * cols;
        for a in 0..time_taps {
            let src = t as isize + a as isize - ca as isize;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let src = src as usize * cols;
            for b in 0..freq_taps {
                let off = b as isize - cb as isize;
                let (lo, hi) = valid_cols(cols, off);
                let xs = &x[(src as isize + lo as isize + off) as usize..(src as isize + hi as isize + off) as usize];
                let (mut sr, mut si) = (T::zero(), T::zero());
                for ((&ur, &ui), &v) in up_re[dst + lo..dst + hi]
                    .iter()
                    .zip(&up_im[dst + lo..dst + hi])
                    .zip(xs)
                {
                    sr += ur * v;
                    si += ui * v;
                }
                g_re[a * freq_taps + b] += sr;
                g_im[a * freq_taps + b] += si;
            }
        }
    }
    (g_re, g_im)
}

fn check_logmel<T: Real>(lm: &FeatureSequence<T>) -> Result<(), FeatureError> {
    if lm.channels != 1 {
        return Err(FeatureError::Shape {
            expected: "single-channel T x F".into(),
            got: format!("{:?}", lm.shape()),
        });
    }
    Ok(())
}

/// Spectro-temporal modulation features: for each filter, the real and
/// imaginary planes of the cross-correlation with the log-mel input,
/// interleaved as channels `2i` and `2i + 1`.
pub fn stmf<T: Real>(
    logmel: &FeatureSequence<T>,
    bank: &StrfBank<T>,
) -> Result<FeatureSequence<T>, FeatureError> {
    check_logmel(logmel)?;
    let (rows, cols) = (logmel.frames, logmel.dim);
    let plane = rows * cols;
    let mut data = vec![T::zero(); 2 * bank.n_filters() * plane];
    for (i, chunk) in data.chunks_exact_mut(2 * plane).enumerate() {
        let (re, im) = chunk.split_at_mut(plane);
        correlate_same(&logmel.data, rows, cols, &bank.kernel(i), re, im);
    }
    FeatureSequence::new(
        FeatureKind::Stmf,
        2 * bank.n_filters(),
        rows,
        cols,
        logmel.frame_rate,
        data,
    )
}

/// Gradient of a scalar loss with respect to each filter's rate and scale,
/// given the loss gradient `upstream` with respect to the STMF output.
pub fn strf_param_grad<T: Real>(
    logmel: &FeatureSequence<T>,
    bank: &StrfBank<T>,
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>), FeatureError> {
    check_logmel(logmel)?;
    let (rows, cols) = (logmel.frames, logmel.dim);
    let plane = rows * cols;
    let n = bank.n_filters();
    if upstream.len() != 2 * n * plane {
        return Err(FeatureError::Shape {
            expected: format!("{}x{rows}x{cols}", 2 * n),
            got: format!("{} values", upstream.len()),
        });
    }
    let mut d_rate = Vec::with_capacity(n);
    let mut d_scale = Vec::with_capacity(n);
    for (i, up) in upstream.chunks_exact(2 * plane).enumerate() {
        let (up_re, up_im) = up.split_at(plane);
        let (g_re, g_im) = kernel_grad(
            &logmel.data,
            rows,
            cols,
            bank.time_taps,
            bank.freq_taps,
            up_re,
            up_im,
        );
        let (dr, ds) = bank.kernel(i).param_grad(&g_re, &g_im);
        d_rate.push(dr);
        d_scale.push(ds);
    }
    Ok((d_rate, d_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(rows: usize, cols: usize, seed: u64) -> FeatureSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureSequence::new(FeatureKind::LogMel, 1, rows, cols, 100.0, data).unwrap()
    }

    #[test]
    fn zero_modulation_is_real_hann_envelope() {
        let k = gabor_strf_kernel(0.0f64, 0.0, 6, 5, 0.01);
        assert!(k.im.iter().all(|&v| v.abs() < 1e-15));
        let ht: Vec<f64> = interior_hann(6);
        let hf: Vec<f64> = interior_hann(5);
        let ratio = k.re[0] / (ht[0] * hf[0]);
        for a in 0..6 {
            for b in 0..5 {
                assert!((k.re[a * 5 + b] - ratio * ht[a] * hf[b]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn negated_modulation_conjugates_and_norm_is_one() {
        let k = gabor_strf_kernel(7.3f64, 0.21, 32, 16, 0.01);
        let c = gabor_strf_kernel(-7.3f64, -0.21, 32, 16, 0.01);
        assert!((k.norm() - 1.0).abs() < 1e-12);
        for i in 0..k.re.len() {
            assert!((k.re[i] - c.re[i]).abs() < 1e-14);
            assert!((k.im[i] + c.im[i]).abs() < 1e-14);
        }
        let k32 = gabor_strf_kernel(7.3f32, 0.21, 32, 16, 0.01);
        assert!((k32.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_input_and_linearity() {
        let bank = StrfBank::<f64>::log_spaced(3, 7, 5, 0.01).unwrap();
        let zero = FeatureSequence::new(FeatureKind::LogMel, 1, 12, 9, 100.0, vec![0.0; 108]).unwrap();
        assert!(stmf(&zero, &bank).unwrap().data.iter().all(|&v| v == 0.0));
        let x = lm(12, 9, 1);
        let a = stmf(&x, &bank).unwrap();
        let b = stmf(&x.scaled(-1.7), &bank).unwrap();
        assert_eq!(a.shape(), (6, 12, 9));
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u * -1.7 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_interior_equals_kernel_sum() {
        let bank = StrfBank::new(vec![0.0f64], vec![0.0], 5, 5, 0.01).unwrap();
        let c = 2.5;
        let x = FeatureSequence::new(FeatureKind::LogMel, 1, 11, 13, 100.0, vec![c; 143]).unwrap();
        let out = stmf(&x, &bank).unwrap();
        let k = bank.kernel(0);
        let sum: f64 = k.re.iter().sum();
        for t in 2..9 {
            for f in 2..11 {
                assert!((out.at(0, t, f) - c * sum).abs() < 1e-12);
                assert!(out.at(1, t, f).abs() < 1e-12);
            }
        }
        // a corner sees only the lower-right 3x3 quadrant of the kernel
        let corner: f64 = (2..5).flat_map(|a| (2..5).map(move |b| (a, b))).map(|(a, b)| k.re[a * 5 + b]).sum();
        assert!((out.at(0, 0, 0) - c * corner).abs() < 1e-12);
    }

    #[test]
    fn direct_summation_oracle() {
        let bank = StrfBank::new(vec![9.0f64], vec![0.3], 4, 3, 0.01).unwrap();
        let x = lm(6, 5, 2);
        let out = stmf(&x, &bank).unwrap();
        let k = bank.kernel(0);
        for t in 0..6 {
            for f in 0..5 {
                let (mut r, mut i) = (0.0, 0.0);
                for a in 0..4 {
                    for b in 0..3 {
                        let (st, sf) = (t as isize + a as isize - 1, f as isize + b as isize - 1);
                        if (0..6).contains(&st) && (0..5).contains(&sf) {
                            let v = x.at(0, st as usize, sf as usize);
                            r += k.re[a * 3 + b] * v;
                            i += k.im[a * 3 + b] * v;
                        }
                    }
                }
                assert!((out.at(0, t, f) - r).abs() < 1e-12);
                assert!((out.at(1, t, f) - i).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_reversal_with_negated_rate() {
        let rates = vec![4.0f64, -11.0];
        let scales = vec![0.1, 0.37];
        let bank = StrfBank::new(rates.clone(), scales.clone(), 7, 5, 0.01).unwrap();
        let neg = StrfBank::new(rates.iter().map(|r| -r).collect(), scales, 7, 5, 0.01).unwrap();
        let x = lm(15, 8, 3);
        let mut rev = x.clone();
        for t in 0..15 {
            rev.data[t * 8..(t + 1) * 8].copy_from_slice(&x.data[(14 - t) * 8..(15 - t) * 8]);
        }
        let a = stmf(&x, &bank).unwrap();
        let b = stmf(&rev, &neg).unwrap();
        for c in 0..4 {
            for t in 0..15 {
                for f in 0..8 {
                    assert!((a.at(c, t, f) - b.at(c, 14 - t, f)).abs() < 1e-12);
                }
            }
        }
    }

    fn weighted_loss(x: &FeatureSequence<f64>, bank: &StrfBank<f64>, w: &[f64]) -> f64 {
        stmf(x, bank).unwrap().data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn fd_check(x: &FeatureSequence<f64>, bank: &StrfBank<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * bank.n_filters() * x.frames * x.dim;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (dr, ds) = strf_param_grad(x, bank, &w).unwrap();
        let eps = 1e-4;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..bank.n_filters() {
            for which in 0..2 {
                let mut p = bank.clone();
                let mut m = bank.clone();
                if which == 0 {
                    p.rates[i] += eps;
                    m.rates[i] -= eps;
                    analytic.push(dr[i]);
                } else {
                    p.scales[i] += eps;
                    m.scales[i] -= eps;
                    analytic.push(ds[i]);
                }
                numeric.push((weighted_loss(x, &p, &w) - weighted_loss(x, &m, &w)) / (2.0 * eps));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let bank = StrfBank::<f64>::log_spaced(3, 32, 16, 0.01).unwrap();
        fd_check(&lm(20, 80, 4), &bank, 5);
    }

    #[test]
    fn scale_grad_on_constant_input_with_rate_only_kernel() {
        let bank = StrfBank::new(vec![6.0f64], vec![0.0], 9, 7, 0.01).unwrap();
        let x = FeatureSequence::new(FeatureKind::LogMel, 1, 14, 10, 100.0, vec![1.3; 140]).unwrap();
        fd_check(&x, &bank, 6);
    }

    #[test]
    fn zero_upstream_and_shape_errors() {
        let bank = StrfBank::<f64>::log_spaced(2, 5, 5, 0.01).unwrap();
        let x = lm(8, 6, 7);
        let (dr, ds) = strf_param_grad(&x, &bank, &vec![0.0; 4 * 48]).unwrap();
        assert!(dr.iter().chain(&ds).all(|&v| v == 0.0));
        assert!(strf_param_grad(&x, &bank, &[0.0; 5]).is_err());
        assert!(StrfBank::new(vec![1.0f64], vec![], 5, 5, 0.01).is_err());
        assert!(StrfBank::new(vec![1.0f64], vec![0.1], 1, 5, 0.01).is_err());
    }

    #[test]
    fn default_bank_spans_init_ranges() {
        let bank = StrfBank::<f64>::default_bank();
        assert_eq!(bank.n_filters(), 8);
        assert!((bank.rates[0] - 2.0).abs() < 1e-12 && (bank.rates[7] - 32.0).abs() < 1e-9);
        assert!((bank.scales[0] - 0.06).abs() < 1e-12 && (bank.scales[7] - 0.5).abs() < 1e-12);
    }
}
