//! Compute kernels. Every spatial activation is stored channel-major as
//! `[C, N, H, W]`, so a convolution is a single GEMM against an im2col
//! buffer and its result lands directly in the same layout.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per chunk of the batch.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { c_in, h, w, k, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn chunk(&self, n: usize) -> usize {
        let per_sample = self.rows() * self.ho * self.wo;
        (COLS_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
    }
}

fn im2col<T: Scalar>(x: &[T], n_total: usize, g: &ConvGeom, n0: usize, n1: usize, cols: &mut [T]) {
    let ncols = (n1 - n0) * g.ho * g.wo;
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in n0..n1 {
                    let plane = &x[(c * n_total + n) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let d = &mut dst[((n - n0) * g.ho + oy) * g.wo..][..g.wo];
                        if iy < 0 || iy >= h {
                            d.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, out) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *out = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], n_total: usize, g: &ConvGeom, n0: usize, n1: usize, dx: &mut [T]) {
    let ncols = (n1 - n0) * g.ho * g.wo;
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in n0..n1 {
                    let plane = &mut dx[(c * n_total + n) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let s = &src[((n - n0) * g.ho + oy) * g.wo..][..g.wo];
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x`: `[C, N, H, W]`, `weight`: `[O, C, K, K]` → `[O, N, Ho, Wo]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.dim(1);
    let o = weight.dim(0);
    let spatial = g.ho * g.wo;
    let total = n * spatial;
    let mut out = Tensor::zeros(&[o, n, g.ho, g.wo]);
    let rows = g.rows();
    if g.is_pointwise() {
        T::gemm(o, rows, total, T::one(), weight.data(), rows as isize, 1, x.data(), total as isize, 1,
            T::zero(), out.data_mut(), total as isize, 1);
    } else {
        let chunk = g.chunk(n);
        let mut cols = vec![T::zero(); rows * chunk * spatial];
        let mut n0 = 0;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let ncols = (n1 - n0) * spatial;
            im2col(x.data(), n, g, n0, n1, &mut cols[..rows * ncols]);
            T::gemm(o, rows, ncols, T::one(), weight.data(), rows as isize, 1, &cols[..rows * ncols],
                ncols as isize, 1, T::zero(), &mut out.data_mut()[n0 * spatial..], total as isize, 1);
            n0 = n1;
        }
    }
    if let Some(b) = bias {
        for (oc, row) in out.data_mut().chunks_mut(total).enumerate() {
            let bv = b.data()[oc];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let n = x.dim(1);
    let o = weight.dim(0);
    let spatial = g.ho * g.wo;
    let total = n * spatial;
    let rows = g.rows();
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    if g.is_pointwise() {
        T::gemm(o, total, rows, T::one(), dy.data(), total as isize, 1, x.data(), 1, total as isize,
            T::zero(), dw.data_mut(), rows as isize, 1);
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, o, total, T::one(), weight.data(), 1, rows as isize, dy.data(), total as isize, 1,
                T::zero(), dx.data_mut(), total as isize, 1);
        }
    } else {
        let chunk = g.chunk(n);
        let mut cols = vec![T::zero(); rows * chunk * spatial];
        let mut dcols = if need_dx { vec![T::zero(); rows * chunk * spatial] } else { Vec::new() };
        let mut n0 = 0;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let ncols = (n1 - n0) * spatial;
            im2col(x.data(), n, g, n0, n1, &mut cols[..rows * ncols]);
            let dy_chunk = &dy.data()[n0 * spatial..];
            T::gemm(o, ncols, rows, T::one(), dy_chunk, total as isize, 1, &cols[..rows * ncols], 1,
                ncols as isize, T::one(), dw.data_mut(), rows as isize, 1);
            if let Some(dx) = dx.as_mut() {
                let dc = &mut dcols[..rows * ncols];
                T::gemm(rows, o, ncols, T::one(), weight.data(), 1, rows as isize, dy_chunk, total as isize,
                    1, T::zero(), dc, ncols as isize, 1);
                col2im(dc, n, g, n0, n1, dx.data_mut());
            }
            n0 = n1;
        }
    }
    let db = has_bias.then(|| {
        let sums = dy.data().chunks(total).map(|r| r.iter().copied().sum()).collect();
        Tensor::from_vec(&[o], sums)
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel batch statistics captured during a training forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub unbiased_var: Vec<T>,
}

pub(crate) fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BnBatchStats<T>) {
    let c = x.dim(0);
    let m = x.len() / c;
    let mf = T::from_usize(m).unwrap();
    let mut out = Tensor::zeros(x.shape());
    let mut stats = BnBatchStats { mean: vec![T::zero(); c], inv_std: vec![T::zero(); c], unbiased_var: vec![T::zero(); c] };
    for ch in 0..c {
        let row = x.row(ch);
        let mean = row.iter().copied().sum::<T>() / mf;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
        let inv_std = T::one() / (var + eps).sqrt();
        let (gm, bt) = (gamma[ch], beta[ch]);
        for (o, v) in out.row_mut(ch).iter_mut().zip(row) {
            *o = gm * (*v - mean) * inv_std + bt;
        }
        stats.mean[ch] = mean;
        stats.inv_std[ch] = inv_std;
        stats.unbiased_var[ch] = if m > 1 { var * mf / T::from_usize(m - 1).unwrap() } else { var };
    }
    (out, stats)
}

pub(crate) fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..x.dim(0) {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for (o, v) in out.row_mut(ch).iter_mut().zip(x.row(ch)) {
            *o = *v * scale + shift;
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &BnBatchStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = x.dim(0);
    let m = x.len() / c;
    let mf = T::from_usize(m).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, inv_std) = (stats.mean[ch], stats.inv_std[ch]);
        let xr = x.row(ch);
        let dyr = dy.row(ch);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (xv, g) in xr.iter().zip(dyr) {
            sum_dy += *g;
            sum_dy_xhat += *g * (*xv - mean) * inv_std;
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * inv_std / mf;
        for ((d, xv), g) in dx.row_mut(ch).iter_mut().zip(xr).zip(dyr) {
            let xhat = (*xv - mean) * inv_std;
            *d = k * (mf * *g - sum_dy - xhat * sum_dy_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn max_pool_forward<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (c, n) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[c, n, g.ho, g.wo]);
    let out_plane = g.ho * g.wo;
    for p in 0..c * n {
        let src = &x.data()[p * g.h * g.w..][..g.h * g.w];
        let dst = &mut out.data_mut()[p * out_plane..][..out_plane];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                dst[oy * g.wo + ox] = pool_window(src, g, oy, ox).1;
            }
        }
    }
    out
}

fn pool_window<T: Scalar>(plane: &[T], g: &ConvGeom, oy: usize, ox: usize) -> (usize, T) {
    let mut best = (usize::MAX, T::neg_infinity());
    for ky in 0..g.k {
        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
        if iy < 0 || iy >= g.h as isize {
            continue;
        }
        for kx in 0..g.k {
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            if ix < 0 || ix >= g.w as isize {
                continue;
            }
            let idx = iy as usize * g.w + ix as usize;
            if plane[idx] > best.1 || best.0 == usize::MAX {
                best = (idx, plane[idx]);
            }
        }
    }
    best
}

pub(crate) fn max_pool_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (c, n) = (x.dim(0), x.dim(1));
    let mut dx = Tensor::zeros(x.shape());
    let out_plane = g.ho * g.wo;
    for p in 0..c * n {
        let src = &x.data()[p * g.h * g.w..][..g.h * g.w];
        let grad = &dy.data()[p * out_plane..][..out_plane];
        let dst = &mut dx.data_mut()[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let (idx, _) = pool_window(src, g, oy, ox);
                if idx != usize::MAX {
                    dst[idx] += grad[oy * g.wo + ox];
                }
            }
        }
    }
    dx
}

pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let inv = T::one() / T::from_usize(plane).unwrap();
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[c, n, 1, 1], data)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let plane = x_shape[2] * x_shape[3];
    let inv = T::one() / T::from_usize(plane).unwrap();
    let mut dx = Tensor::zeros(x_shape);
    for (chunk, g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(*g * inv);
    }
    dx
}

/// `x`: `[I, N, 1, 1]`, `weight`: `[O, I]` → `[O, N, 1, 1]`.
pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (o, i) = (weight.dim(0), weight.dim(1));
    let n = x.dim(1);
    let mut out = Tensor::zeros(&[o, n, 1, 1]);
    T::gemm(o, i, n, T::one(), weight.data(), i as isize, 1, x.data(), n as isize, 1, T::zero(),
        out.data_mut(), n as isize, 1);
    for (row, b) in out.data_mut().chunks_mut(n).zip(bias.data()) {
        row.iter_mut().for_each(|v| *v += *b);
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (o, i) = (weight.dim(0), weight.dim(1));
    let n = x.dim(1);
    let mut dw = Tensor::zeros(&[o, i]);
    T::gemm(o, n, i, T::one(), dy.data(), n as isize, 1, x.data(), 1, n as isize, T::zero(),
        dw.data_mut(), i as isize, 1);
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(i, o, n, T::one(), weight.data(), 1, i as isize, dy.data(), n as isize, 1, T::zero(),
        dx.data_mut(), n as isize, 1);
    let db = Tensor::from_vec(&[o], dy.data().chunks(n).map(|r| r.iter().copied().sum()).collect());
    (dx, dw, db)
}

/// Mean softmax cross-entropy of `[K, N]` logits and the gradient w.r.t. them.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &[T], k: usize, labels: &[usize], want_grad: bool) -> (T, Option<Vec<T>>) {
    let n = labels.len();
    let nf = T::from_usize(n).unwrap();
    let mut loss = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); k * n]);
    for (col, &label) in labels.iter().enumerate() {
        let mut max = T::neg_infinity();
        for r in 0..k {
            max = max.max(logits[r * n + col]);
        }
        let mut z = T::zero();
        for r in 0..k {
            z += (logits[r * n + col] - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - logits[label * n + col];
        if let Some(g) = grad.as_mut() {
            for r in 0..k {
                let p = (logits[r * n + col] - log_z).exp();
                let target = if r == label { T::one() } else { T::zero() };
                g[r * n + col] = (p - target) / nf;
            }
        }
    }
    (loss / nf, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution on NCHW-free indices, used as an oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (c, n) = (x.dim(0), x.dim(1));
        let o = w.dim(0);
        let mut out = Tensor::zeros(&[o, n, g.ho, g.wo]);
        for oc in 0..o {
            for b in 0..n {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ic * n + b) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w.data()[((oc * c + ic) * g.k + ky) * g.k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((oc * n + b) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64) * scale).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (5, 1, 2)] {
            let x = seq(&[3, 2, 7, 6], 0.3);
            let w = seq(&[4, 3, k, k], 0.7);
            let g = ConvGeom::new(3, 7, 6, k, stride, pad).unwrap();
            let fast = conv_forward(&x, &w, None, &g);
            let slow = conv_direct(&x, &w, &g);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = seq(&[2, 2, 5, 5], 0.41);
        let w = seq(&[3, 2, 3, 3], 0.29);
        let g = ConvGeom::new(2, 5, 5, 3, 2, 1).unwrap();
        let y = conv_forward(&x, &w, None, &g);
        // loss = sum(y * r) with a fixed random-ish r
        let r = seq(y.shape(), 0.17);
        let grads = conv_backward(&x, &w, false, &r, &g, true);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| {
            conv_forward(x, w, None, &g).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for idx in [0, 7, 20, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - grads.dw.data()[idx]).abs() < 1e-6);
        }
        let dx = grads.dx.unwrap();
        for idx in [0, 13, 49, 99] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let x = seq(&[2, 3, 2, 2], 0.83);
        let gamma = [1.3, -0.4];
        let beta = [0.1, 0.2];
        let r = seq(x.shape(), 0.37);
        let loss = |x: &Tensor<f64>| {
            let (y, _) = bn_forward_train(x, &gamma, &beta, 1e-5);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, stats) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        let (dx, _, _) = bn_backward(&x, &gamma, &stats, &r);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-5, "idx {idx}: {fd} vs {}", dx.data()[idx]);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        // uniform logits: ln(K)
        let (l, _) = softmax_cross_entropy(&[0.0f64; 8], 4, &[1, 3], false);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
}
