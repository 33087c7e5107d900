//! Brute-force loop oracles and random inputs shared by the integration
//! tests. Nothing here touches the tape or the GEMM kernels.
#![allow(dead_code)]

use pcanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_f32(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// `a [m, k] x b [k, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Zero-padded cross-correlation; `x [b, ci, h, w]`, `k [co, ci, kh, kw]`.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, ci, h, w] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.get(&[n, c, iy as usize, ix as usize]) * k.get(&[o, c, dy, dx]);
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, co, oh, ow], out).unwrap()
}

/// `W[i][j] = exp(-M_ij) / sum_j' exp(-M_ij')` with `M = F1 F2^T`.
pub fn channel_weights(f1: &Tensor<f64>, f2: &Tensor<f64>) -> Vec<f64> {
    let c = f1.shape()[0];
    let l = f1.numel() / c;
    let (a, b) = (f1.data(), f2.data());
    let mut w = vec![0.0; c * c];
    for i in 0..c {
        let m: Vec<f64> = (0..c)
            .map(|j| (0..l).map(|p| a[i * l + p] * b[j * l + p]).sum())
            .collect();
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = m.iter().map(|v| (lo - v).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..c {
            w[i * c + j] = e[j] / z;
        }
    }
    w
}

/// `out[i][p] = sum_j W[i][j] f[j][p]`
pub fn apply_channel_weights(w: &[f64], f: &Tensor<f64>) -> Vec<f64> {
    let c = f.shape()[0];
    let l = f.numel() / c;
    let mut out = vec![0.0; c * l];
    for i in 0..c {
        for p in 0..l {
            out[i * l + p] = (0..c).map(|j| w[i * c + j] * f.data()[j * l + p]).sum();
        }
    }
    out
}

/// Gram matrix over positions divided by the position count, optionally
/// followed by signed square root and L2 normalization.
pub fn bilinear_pool(f: &Tensor<f64>, normalize: bool) -> Vec<f64> {
    let c = f.shape()[0];
    let l = f.numel() / c;
    let d = f.data();
    let mut v = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for p in 0..l {
                acc += d[i * l + p] * d[j * l + p];
            }
            v[i * c + j] = acc / l as f64;
        }
    }
    if normalize {
        for x in v.iter_mut() {
            *x = x.signum() * x.abs().sqrt();
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

/// Half-pixel-center bilinear resize of one `h x w` plane with edge clamping.
pub fn upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |d: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, ty) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, tx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
