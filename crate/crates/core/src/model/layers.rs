//! Dense kernels with explicit backward passes. Tensors are flat,
//! row-major slices.

use crate::scalar::Real;

/// Geometry of a stride-2, same-padded 2D convolution over a
/// `c_in x h x w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub const STRIDE: usize = 2;

    pub fn out_h(&self) -> usize {
        self.h.div_ceil(Self::STRIDE)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(Self::STRIDE)
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    fn pad(&self) -> isize {
        ((self.k - 1) / 2) as isize
    }

    /// Visits every (output, weight, input) index triple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, p) = (self.out_h(), self.out_w(), self.pad());
        for o in 0..self.c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let out = (o * oh + i) * ow + j;
                    for c in 0..self.c_in {
                        for a in 0..self.k {
                            let r = (Self::STRIDE * i) as isize + a as isize - p;
                            if r < 0 || r >= self.h as isize {
                                continue;
                            }
                            for b in 0..self.k {
                                let col = (Self::STRIDE * j) as isize + b as isize - p;
                                if col < 0 || col >= self.w as isize {
                                    continue;
                                }
                                let wi = ((o * self.c_in + c) * self.k + a) * self.k + b;
                                let xi = (c * self.h + r as usize) * self.w + col as usize;
                                f(out, wi, xi);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Pre-activation convolution output, `c_out x out_h x out_w`.
pub fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let mut out: Vec<T> = (0..g.c_out)
        .flat_map(|o| std::iter::repeat_n(bias[o], plane))
        .collect();
    g.for_each_tap(|o, wi, xi| out[o] += weight[wi] * x[xi]);
    out
}

/// Accumulates weight and bias gradients, and the input gradient when
/// requested.
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    d_x: Option<&mut [T]>,
) {
    let plane = g.out_h() * g.out_w();
    for (o, chunk) in d_out.chunks_exact(plane).enumerate() {
        d_bias[o] += chunk.iter().copied().sum::<T>();
    }
    match d_x {
        Some(dx) => g.for_each_tap(|o, wi, xi| {
            d_weight[wi] += d_out[o] * x[xi];
            dx[xi] += d_out[o] * weight[wi];
        }),
        None => g.for_each_tap(|o, wi, xi| d_weight[wi] += d_out[o] * x[xi]),
    }
}

/// `y = W x + b` with `W` stored `out x in`.
pub fn linear_forward<T: Real>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    weight
        .chunks_exact(n_in)
        .zip(bias)
        .map(|(row, &b)| b + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>())
        .collect()
}

pub fn linear_backward<T: Real>(
    weight: &[T],
    x: &[T],
    d_y: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    d_x: Option<&mut [T]>,
) {
    let n_in = x.len();
    for ((row, &dy), db) in d_weight.chunks_exact_mut(n_in).zip(d_y).zip(d_bias.iter_mut()) {
        *db += dy;
        for (dw, &v) in row.iter_mut().zip(x) {
            *dw += dy * v;
        }
    }
    if let Some(dx) = d_x {
        for (row, &dy) in weight.chunks_exact(n_in).zip(d_y) {
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += dy * w;
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        *v = v.max(T::zero());
    }
}

/// Zeroes gradient entries whose activation was clipped.
pub fn relu_mask<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Saved state of one attention pooling pass.
#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    /// `tanh(W h_t)`, frames x attn_dim.
    pub u: Vec<T>,
    pub weights: Vec<T>,
}

/// Self-attentive pooling: `s_t = v . tanh(W h_t)`, `a = softmax(s)`,
/// output `sum_t a_t h_t`. `hidden` is frames x d, `w` is attn x d.
pub fn attn_pool_forward<T: Real>(hidden: &[T], d: usize, w: &[T], v: &[T]) -> (Vec<T>, PoolCache<T>) {
    let a_dim = v.len();
    let frames = hidden.len() / d;
    let mut u = Vec::with_capacity(frames * a_dim);
    let mut scores = Vec::with_capacity(frames);
    for h in hidden.chunks_exact(d) {
        let mut s = T::zero();
        for (row, &vk) in w.chunks_exact(d).zip(v) {
            let t = row.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>().tanh();
            u.push(t);
            s += vk * t;
        }
        scores.push(s);
    }
    let weights = softmax(&scores);
    let mut z = vec![T::zero(); d];
    for (h, &a) in hidden.chunks_exact(d).zip(&weights) {
        for (zi, &hi) in z.iter_mut().zip(h) {
            *zi += a * hi;
        }
    }
    (z, PoolCache { u, weights })
}

#[allow(clippy::too_many_arguments)]
pub fn attn_pool_backward<T: Real>(
    hidden: &[T],
    d: usize,
    w: &[T],
    v: &[T],
    cache: &PoolCache<T>,
    d_z: &[T],
    d_w: &mut [T],
    d_v: &mut [T],
    d_hidden: &mut [T],
) {
    let a_dim = v.len();
    let d_alpha: Vec<T> = hidden
        .chunks_exact(d)
        .map(|h| h.iter().zip(d_z).map(|(&a, &b)| a * b).sum())
        .collect();
    let mean: T = cache.weights.iter().zip(&d_alpha).map(|(&a, &g)| a * g).sum();
    for (t, (h, dh)) in hidden.chunks_exact(d).zip(d_hidden.chunks_exact_mut(d)).enumerate() {
        let alpha = cache.weights[t];
        let ds = alpha * (d_alpha[t] - mean);
        for (dhi, &dz) in dh.iter_mut().zip(d_z) {
            *dhi += alpha * dz;
        }
        let u = &cache.u[t * a_dim..(t + 1) * a_dim];
        for k in 0..a_dim {
            d_v[k] += ds * u[k];
            let g = ds * v[k] * (T::one() - u[k] * u[k]);
            let row = &w[k * d..(k + 1) * d];
            let drow = &mut d_w[k * d..(k + 1) * d];
            for i in 0..d {
                drow[i] += g * h[i];
                dh[i] += g * row[i];
            }
        }
    }
}
