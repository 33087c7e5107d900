//! Raw numeric kernels on flat row-major buffers. The autodiff tape and the
//! forward-only image utilities are built on these.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernels.len() != 4 || input[1] != kernels[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernels.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernels[2], kernels[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernels.to_vec(),
            });
        }
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            h,
            w,
            c_out: kernels[0],
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - padding` lies
/// inside `[0, w)`.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let limit = g.w + g.padding;
    let hi = if limit <= kx {
        0
    } else {
        ((limit - kx - 1) / g.stride + 1).min(g.out_w)
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample into a `(c_in*kh*kw) x (out_h*out_w)` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (j, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back into the image.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[start + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_sample()..(b + 1) * g.in_sample()], &mut cols);
        T::gemm(
            false,
            false,
            g.c_out,
            g.col_cols(),
            g.col_rows(),
            T::one(),
            k,
            &cols,
            T::zero(),
            &mut out[b * g.out_sample()..(b + 1) * g.out_sample()],
        );
    }
    out
}

/// Returns `(d_input, d_kernels)`; either may be skipped.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    dy: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.c_out * g.col_rows()]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.out_sample()..(b + 1) * g.out_sample()];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[b * g.in_sample()..(b + 1) * g.in_sample()], &mut cols);
            // dK += dY * cols^T, accumulated in batch order
            T::gemm(
                false,
                true,
                g.c_out,
                g.col_rows(),
                g.col_cols(),
                T::one(),
                dy_b,
                &cols,
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T * dY
            T::gemm(
                true,
                false,
                g.col_rows(),
                g.col_cols(),
                g.c_out,
                T::one(),
                k,
                dy_b,
                T::zero(),
                &mut cols,
            );
            col2im(g, &cols, &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()]);
        }
    }
    (dx, dk)
}

/// Max pooling over the trailing two axes. Returns the pooled values and the
/// flat input index each output was taken from (ties → lowest flat index).
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    if size == 2 && stride == 2 {
        for p in 0..planes {
            for oy in 0..oh {
                let r0 = p * h * w + 2 * oy * w;
                let (top, bottom) = (&x[r0..r0 + 2 * ow], &x[r0 + w..r0 + w + 2 * ow]);
                for (ox, (a, b)) in top.chunks_exact(2).zip(bottom.chunks_exact(2)).enumerate() {
                    let i = r0 + 2 * ox;
                    let (mut best, mut at) = (a[0], i);
                    if a[1] > best {
                        (best, at) = (a[1], i + 1);
                    }
                    if b[0] > best {
                        (best, at) = (b[0], i + w);
                    }
                    if b[1] > best {
                        (best, at) = (b[1], i + w + 1);
                    }
                    out.push(best);
                    idx.push(at);
                }
            }
        }
        return (out, idx, oh, ow);
    }
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let top = base + oy * stride * w;
            for ox in 0..ow {
                let corner = top + ox * stride;
                let mut best = corner;
                for dy in 0..size {
                    let row = &x[corner + dy * w..corner + dy * w + size];
                    for (dx, &v) in row.iter().enumerate() {
                        // strict > in row-major scan keeps the lowest flat index on ties
                        if v > x[best] {
                            best = corner + dy * w + dx;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx, oh, ow)
}

/// Half-pixel-center source coordinate for bilinear resampling, clamped to
/// `[0, in_len - 1]`. Returns the two taps and the weight of the upper tap.
fn source_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resampling of each `h x w` plane in `x` to `out_h x out_w`.
pub fn resize_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys: Vec<_> = (0..out_h).map(|d| source_taps(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| source_taps(d, w, out_w)).collect();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v00 = plane[y0 * w + x0].to_f64_lossy();
                let v01 = plane[y0 * w + x1].to_f64_lossy();
                let v10 = plane[y1 * w + x0].to_f64_lossy();
                let v11 = plane[y1 * w + x1].to_f64_lossy();
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.push(T::from_f64_lossy(top + (bottom - top) * fy));
            }
        }
    }
    out
}

/// Forward-only bilinear upsampling of a single `h x w` map (half-pixel
/// centers, edge clamping).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::shape(
            "upsample_bilinear",
            format!("expected a 2-D map, got {:?}", x.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "upsample_bilinear",
            format!("non-positive target size {out_h}x{out_w}"),
        ));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    Tensor::from_vec(&[out_h, out_w], resize_planes(x.data(), 1, h, w, out_h, out_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resample_is_exact() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.37).collect();
        assert_eq!(resize_planes(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn upsample_constant_and_degenerate() {
        let c = Tensor::<f64>::full(&[3, 5], 3.0);
        let up = upsample_bilinear(&c, 7, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let one = Tensor::<f64>::full(&[1, 1], 9.0);
        let up = upsample_bilinear(&one, 4, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 9.0));
        assert!(upsample_bilinear(&one, 0, 4).is_err());
    }

    #[test]
    fn maxpool_fast_path_matches_general() {
        let x: Vec<f64> = (0..2 * 6 * 7).map(|i| ((i * 37) % 11) as f64).collect();
        let fast = maxpool2d_forward(&x, 2, 6, 7, 2, 2);
        // a 2-wide window with stride 2 is also reachable through the general loop
        let mut general = (Vec::new(), Vec::new());
        for p in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut best = p * 42 + 2 * oy * 7 + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = p * 42 + (2 * oy + dy) * 7 + 2 * ox + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    general.0.push(x[best]);
                    general.1.push(best);
                }
            }
        }
        assert_eq!((fast.0, fast.1), general);
        assert_eq!((fast.2, fast.3), (3, 3));
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let x = [2.0f32, 2.0, 2.0, 2.0];
        let (out, idx, oh, ow) = maxpool2d_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!((out, idx, oh, ow), (vec![2.0], vec![0], 1, 1));
    }

    #[test]
    fn conv_geometry_rejects_oversized_kernel() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        let g = ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
        let g = ConvGeometry::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
    }
}
