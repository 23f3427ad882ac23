//! CPU kernels for the 4×4 convolution family, batch normalization and
//! pointwise activations, each with its backward pass.
//!
//! Convolution weights are `[out, in, 4, 4]`; transpose-convolution weights
//! are `[in, out, 4, 4]`. Convolutions unfold patches into a matrix and multiply
//! with a blocked GEMM; work is split across samples with rayon and
//! every reduction runs in a fixed order, so results are bit-reproducible
//! regardless of thread count.

use rayon::prelude::*;

use super::tensor::Tensor;

pub const K: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Range of output indices `o` for which `o * stride + k - pad` falls in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let (k, pad, stride, len) = (k as i64, pad as i64, stride as i64, len as i64);
    let lo = (pad - k).max(0);
    let lo = (lo + stride - 1) / stride;
    let hi = (len - 1 + pad - k).div_euclid(stride) + 1;
    let hi = hi.clamp(0, out_len as i64);
    (lo.min(hi) as usize, hi as usize)
}

/// Geometry of a 4×4 convolution from an `h × w` plane to an `oh × ow` plane.
#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `c` input planes into a `[c·16, oh·ow]` patch matrix, zero outside.
fn im2col(src: &[f64], c: usize, g: Geom, col: &mut [f64]) {
    let p = g.cols();
    col.fill(0.0);
    for ch in 0..c {
        let plane = &src[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..K {
            let (oy0, oy1) = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for kx in 0..K {
                let (ox0, ox1) = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                let row = &mut col[((ch * K + ky) * K + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let srow = &plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let drow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        drow[ox] = srow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto `c` planes.
fn col2im(col: &[f64], c: usize, g: Geom, dst: &mut [f64]) {
    let p = g.cols();
    for ch in 0..c {
        let plane = &mut dst[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..K {
            let (oy0, oy1) = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for kx in 0..K {
                let (ox0, ox1) = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                let row = &col[((ch * K + ky) * K + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let drow = &mut plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let srow = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Row-major `c = a·b + beta·c` with optional transposes of `a` and `b`;
/// `a` is `m × k` and `b` is `k × n` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths are checked in the assertion.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// 4×4 convolution with zero padding `pad` before each spatial axis.
pub fn conv_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let in_ch = x.c;
    assert_eq!(weight.len(), out_ch * in_ch * K * K);
    let g = Geom { h: x.h, w: x.w, oh: out_h, ow: out_w, stride, pad };
    let mut out = Tensor::zeros(x.n, out_ch, out_h, out_w);
    let (ip, op) = (x.plane(), g.cols());
    out.data.par_chunks_mut(out_ch * op).enumerate().for_each(|(n, dst)| {
        let mut col = vec![0.0; in_ch * K * K * op];
        im2col(&x.data[n * in_ch * ip..(n + 1) * in_ch * ip], in_ch, g, &mut col);
        gemm(out_ch, in_ch * K * K, op, weight, false, &col, false, 0.0, dst);
        if let Some(b) = bias {
            dst.chunks_mut(op).zip(b).for_each(|(plane, bv)| plane.iter_mut().for_each(|v| *v += bv));
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

fn bias_grad(grad_out: &Tensor) -> Vec<f64> {
    let (c, op) = (grad_out.c, grad_out.plane());
    (0..c)
        .map(|o| (0..grad_out.n).map(|n| grad_out.data[(n * c + o) * op..(n * c + o + 1) * op].iter().sum::<f64>()).sum())
        .collect()
}

/// Sums per-sample weight gradients in sample order.
fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads {
    let (in_ch, out_ch) = (x.c, grad_out.c);
    let g = Geom { h: x.h, w: x.w, oh: grad_out.h, ow: grad_out.w, stride, pad };
    let (ip, op, kk) = (x.plane(), g.cols(), in_ch * K * K);
    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..x.n)
        .into_par_iter()
        .map(|n| {
            let gout = &grad_out.data[n * out_ch * op..(n + 1) * out_ch * op];
            let mut col = vec![0.0; kk * op];
            im2col(&x.data[n * in_ch * ip..(n + 1) * in_ch * ip], in_ch, g, &mut col);
            let mut dw = vec![0.0; out_ch * kk];
            gemm(out_ch, op, kk, gout, false, &col, true, 0.0, &mut dw);
            let dx = need_dx.then(|| {
                gemm(kk, out_ch, op, weight, true, gout, false, 0.0, &mut col);
                let mut plane = vec![0.0; in_ch * ip];
                col2im(&col, in_ch, g, &mut plane);
                plane
            });
            (dw, dx)
        })
        .collect();
    let (dws, dxs): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let dx = need_dx.then(|| Tensor::from_vec(x.n, in_ch, x.h, x.w, dxs.into_iter().flatten().flatten().collect()));
    ConvGrads { dx, dweight: sum_in_order(dws, out_ch * kk), dbias: bias_grad(grad_out) }
}

/// Stride-2, padding-1 4×4 transpose convolution; doubles both spatial dims.
///
/// It is the adjoint of the matching stride-2 convolution from the output
/// plane to the input plane, so it reuses that convolution's patch layout.
pub fn conv_t_forward(x: &Tensor, weight: &[f64], bias: Option<&[f64]>, out_ch: usize) -> Tensor {
    let in_ch = x.c;
    assert_eq!(weight.len(), in_ch * out_ch * K * K);
    let g = Geom { h: 2 * x.h, w: 2 * x.w, oh: x.h, ow: x.w, stride: 2, pad: 1 };
    let mut out = Tensor::zeros(x.n, out_ch, 2 * x.h, 2 * x.w);
    let (ip, op) = (x.plane(), 4 * x.plane());
    out.data.par_chunks_mut(out_ch * op).enumerate().for_each(|(n, dst)| {
        let mut col = vec![0.0; out_ch * K * K * ip];
        gemm(out_ch * K * K, in_ch, ip, weight, true, &x.data[n * in_ch * ip..(n + 1) * in_ch * ip], false, 0.0, &mut col);
        col2im(&col, out_ch, g, dst);
        if let Some(b) = bias {
            dst.chunks_mut(op).zip(b).for_each(|(plane, bv)| plane.iter_mut().for_each(|v| *v += bv));
        }
    });
    out
}

pub fn conv_t_backward(x: &Tensor, weight: &[f64], grad_out: &Tensor, need_dx: bool) -> ConvGrads {
    let (in_ch, out_ch) = (x.c, grad_out.c);
    let g = Geom { h: grad_out.h, w: grad_out.w, oh: x.h, ow: x.w, stride: 2, pad: 1 };
    let (ip, op, kk) = (x.plane(), grad_out.plane(), out_ch * K * K);
    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..x.n)
        .into_par_iter()
        .map(|n| {
            let src = &x.data[n * in_ch * ip..(n + 1) * in_ch * ip];
            let mut col = vec![0.0; kk * ip];
            im2col(&grad_out.data[n * out_ch * op..(n + 1) * out_ch * op], out_ch, g, &mut col);
            let mut dw = vec![0.0; in_ch * kk];
            gemm(in_ch, ip, kk, src, false, &col, true, 0.0, &mut dw);
            let dx = need_dx.then(|| {
                let mut plane = vec![0.0; in_ch * ip];
                gemm(in_ch, kk, ip, weight, false, &col, false, 0.0, &mut plane);
                plane
            });
            (dw, dx)
        })
        .collect();
    let (dws, dxs): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let dx = need_dx.then(|| Tensor::from_vec(x.n, in_ch, x.h, x.w, dxs.into_iter().flatten().flatten().collect()));
    ConvGrads { dx, dweight: sum_in_order(dws, in_ch * kk), dbias: bias_grad(grad_out) }
}

/// Per-channel batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance over `N × H × W`.
    pub var: Vec<f64>,
}

pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache) {
    let (c, p) = (x.c, x.plane());
    let m = (x.n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..x.n {
            s += x.data[(n * c + ch) * p..(n * c + ch + 1) * p].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for n in 0..x.n {
            v += x.data[(n * c + ch) * p..(n * c + ch + 1) * p].iter().map(|a| (a - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.n, c, x.h, x.w);
    let mut y = Tensor::zeros(x.n, c, x.h, x.w);
    for n in 0..x.n {
        for ch in 0..c {
            let base = (n * c + ch) * p;
            for k in base..base + p {
                let xh = (x.data[k] - mean[ch]) * inv_std[ch];
                xhat.data[k] = xh;
                y.data[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std, mean, var })
}

pub fn batchnorm_eval(x: &Tensor, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> Tensor {
    let (c, p) = (x.c, x.plane());
    let mut y = x.clone();
    for n in 0..x.n {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + BN_EPS).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            let base = (n * c + ch) * p;
            y.data[base..base + p].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let xhat = &cache.xhat;
    let (c, p) = (xhat.c, xhat.plane());
    let m = (xhat.n * p) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..xhat.n {
        for ch in 0..c {
            let base = (n * c + ch) * p;
            for k in base..base + p {
                dgamma[ch] += grad_out.data[k] * xhat.data[k];
                dbeta[ch] += grad_out.data[k];
            }
        }
    }
    let mut dx = Tensor::zeros(xhat.n, c, xhat.h, xhat.w);
    for n in 0..xhat.n {
        for ch in 0..c {
            let base = (n * c + ch) * p;
            // dxhat = g * gamma; dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let k1 = gamma[ch] * cache.inv_std[ch] / m;
            for k in base..base + p {
                dx.data[k] = k1 * (m * grad_out.data[k] - dbeta[ch] - xhat.data[k] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of leaky ReLU given the layer *input*.
pub fn leaky_relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(input, grad, |x, g| if x > 0.0 { g } else { LEAKY_SLOPE * g })
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(input, grad, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f64::tanh)
}

/// Backward of tanh given the layer *output*.
pub fn tanh_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(output, grad, |y, g| g * (1.0 - y * y))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, |v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Backward of the logistic function given the layer *output*.
pub fn sigmoid_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(output, grad, |p, g| g * p * (1.0 - p))
}

/// Multiplies by a precomputed keep-mask already scaled by `1 / (1 - rate)`.
pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    y
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { data: x.data.iter().map(|&v| f(v)).collect(), ..*x }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor { data: a.data.iter().zip(&b.data).map(|(&x, &g)| f(x, g)).collect(), ..*a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct definition with explicit zero-padding lookups.
    fn conv_naive(x: &Tensor, w: &[f64], b: &[f64], oc: usize, s: usize, pad: usize, oh: usize, ow: usize) -> Tensor {
        let mut out = Tensor::zeros(x.n, oc, oh, ow);
        for n in 0..x.n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for i in 0..x.c {
                            for ky in 0..K {
                                for kx in 0..K {
                                    let iy = (oy * s + ky) as i64 - pad as i64;
                                    let ix = (ox * s + kx) as i64 - pad as i64;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += w[((o * x.c + i) * K + ky) * K + kx]
                                            * x.data[((n * x.c + i) * x.h + iy as usize) * x.w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((n * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter definition of the transpose convolution.
    fn conv_t_naive(x: &Tensor, w: &[f64], b: &[f64], oc: usize) -> Tensor {
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut out = Tensor::zeros(x.n, oc, oh, ow);
        for n in 0..x.n {
            for o in 0..oc {
                for v in out.data[((n * oc + o) * oh) * ow..((n * oc + o + 1) * oh) * ow].iter_mut() {
                    *v = b[o];
                }
            }
            for i in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = x.data[((n * x.c + i) * x.h + y) * x.w + xx];
                        for o in 0..oc {
                            for ky in 0..K {
                                for kx in 0..K {
                                    let oy = (2 * y + ky) as i64 - 1;
                                    let ox = (2 * xx + kx) as i64 - 1;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        out.data[((n * oc + o) * oh + oy as usize) * ow + ox as usize] +=
                                            v * w[((i * oc + o) * K + ky) * K + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(s, pad, h, oh) in &[(2usize, 1usize, 8usize, 4usize), (1, 1, 5, 5), (2, 1, 2, 1)] {
            let x = rand_tensor(&mut rng, 2, 3, h, h);
            let w: Vec<f64> = (0..5 * 3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv_forward(&x, &w, Some(&b), 5, s, pad, oh, oh);
            let slow = conv_naive(&x, &w, &b, 5, s, pad, oh, oh);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_t_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for h in [1usize, 2, 5] {
            let x = rand_tensor(&mut rng, 2, 4, h, h);
            let w: Vec<f64> = (0..4 * 3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv_t_forward(&x, &w, Some(&b), 3);
            let slow = conv_t_naive(&x, &w, &b, 3);
            assert_eq!(fast.shape(), [2, 3, 2 * h, 2 * h]);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Backward kernels satisfy the adjoint identity <A x, g> = <x, A^T g>.
    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 3, 6, 6);
        let w: Vec<f64> = (0..4 * 3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv_forward(&x, &w, None, 4, 2, 1, 3, 3);
        let g = rand_tensor(&mut rng, 2, 4, 3, 3);
        let grads = conv_backward(&x, &w, &g, 2, 1, true);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&grads.dx.unwrap().data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // linear in w as well
        let rhs_w: f64 = w.iter().zip(&grads.dweight).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);

        let wt: Vec<f64> = (0..3 * 4 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yt = conv_t_forward(&x, &wt, None, 4);
        let gt = rand_tensor(&mut rng, 2, 4, 12, 12);
        let gr = conv_t_backward(&x, &wt, &gt, true);
        let lhs: f64 = yt.data.iter().zip(&gt.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gr.dx.unwrap().data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = wt.iter().zip(&gr.dweight).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 3, 2, 4, 4);
        let (y, cache) = batchnorm_train(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.data[(n * 2 + ch) * 16..(n * 2 + ch + 1) * 16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 48.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 48.0;
            assert!(m.abs() < 1e-12);
            assert!((v - cache.var[ch] / (cache.var[ch] + BN_EPS)).abs() < 1e-9);
        }
    }
}
