//! Cross-correlation and its adjoint (transposed convolution), via im2col + GEMM.

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn conv(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return None;
        }
        let eh = (in_h + 2 * pad).checked_sub(kh)?;
        let ew = (in_w + 2 * pad).checked_sub(kw)?;
        Some(Geometry {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: eh / stride + 1,
            out_w: ew / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Whether im2col is the identity layout (1x1, stride 1, no padding).
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
fn valid_range(out: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if in_len + pad > k {
        (in_len + pad - k - 1) / stride + 1
    } else {
        0
    };
    (lo, hi.clamp(lo, out))
}

fn im2col(img: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(g.stride))
                        {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image grid.
fn col2im(cols: &[f64], g: &Geometry, img: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, out_c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != out_c {
            return Err(Error::ShapeMismatch {
                op,
                lhs: Shape::new(1, out_c, 1, 1),
                rhs: b.shape(),
            });
        }
    }
    Ok(())
}

fn conv_geometry(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Geometry> {
    if x.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x,
            rhs: w,
        });
    }
    Geometry::conv(x.c, x.h, x.w, w.h, w.w, stride, pad).ok_or_else(|| Error::InvalidShape {
        op: "conv2d",
        detail: format!(
            "input {x} with kernel {w}, stride {stride}, pad {pad} has no valid output"
        ),
    })
}

/// Cross-correlation. `w` is `(out_c, in_c, kh, kw)`; `bias` has `out_c` values.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = conv_geometry(xs, ws, stride, pad)?;
    check_bias("conv2d", bias, ws.n)?;
    let out_shape = Shape::new(xs.n, ws.n, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * p;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for n in 0..xs.n {
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        let col_view: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(
            Mat::new(w.data(), ws.n, k),
            Mat::new(col_view, k, p),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Ok(out)
}

pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Tensor,
}

/// Exact gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = conv_geometry(xs, ws, stride, pad)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * p;
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for n in 0..xs.n {
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        let go = &gout[n * out_per..(n + 1) * out_per];
        for (co, chunk) in go.chunks_exact(p).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        let col_view: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        gemm(
            Mat::new(go, ws.n, p),
            Mat::t(col_view, k, p),
            1.0,
            dw.data_mut(),
        );
        let dimg = &mut dx.data_mut()[n * in_per..(n + 1) * in_per];
        if g.is_pointwise() {
            gemm(Mat::t(w.data(), ws.n, k), Mat::new(go, ws.n, p), 0.0, dimg);
        } else {
            gemm(
                Mat::t(w.data(), ws.n, k),
                Mat::new(go, ws.n, p),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, &g, dimg);
        }
    }
    Ok(ConvGrads {
        x: dx,
        w: dw,
        bias: db,
    })
}

fn transposed_geometry(
    x: Shape,
    w: Shape,
    stride: usize,
    pad: usize,
) -> Result<(Geometry, usize, usize)> {
    if x.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2d",
            lhs: x,
            rhs: w,
        });
    }
    let bad = || Error::InvalidShape {
        op: "transposed_conv2d",
        detail: format!(
            "input {x} with kernel {w}, stride {stride}, pad {pad} gives a nonpositive output"
        ),
    };
    if stride == 0 || x.h == 0 || x.w == 0 {
        return Err(bad());
    }
    let oh = ((x.h - 1) * stride + w.h)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(bad)?;
    let ow = ((x.w - 1) * stride + w.w)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(bad)?;
    // The column grid of a convolution over the output is exactly the input grid.
    let g = Geometry::conv(w.n, oh, ow, w.h, w.w, stride, pad).ok_or_else(bad)?;
    if g.out_h != x.h || g.out_w != x.w {
        return Err(bad());
    }
    Ok((g, oh, ow))
}

/// `(out_c, in_c, kh, kw)` -> row-major `(in_c, out_c*kh*kw)`.
fn weight_in_major(w: &Tensor) -> Vec<f64> {
    let s = w.shape();
    let kk = s.h * s.w;
    let mut out = vec![0.0; w.numel()];
    for co in 0..s.n {
        for ci in 0..s.c {
            let src = &w.data()[(co * s.c + ci) * kk..(co * s.c + ci + 1) * kk];
            out[ci * s.n * kk + co * kk..ci * s.n * kk + (co + 1) * kk].copy_from_slice(src);
        }
    }
    out
}

/// Adjoint of stride-`stride` cross-correlation: each input pixel scatters a
/// weighted kernel onto the output. Output size is `(in - 1)*stride + k - 2*pad`.
/// `w` is `(out_c, in_c, kh, kw)` with `in_c == x.c`.
pub fn transposed_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let (g, oh, ow) = transposed_geometry(xs, ws, stride, pad)?;
    check_bias("transposed_conv2d", bias, ws.n)?;
    let wt = weight_in_major(w);
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * oh * ow;
    let mut cols = vec![0.0; k * p];
    for n in 0..xs.n {
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        gemm(Mat::t(&wt, xs.c, k), Mat::new(img, xs.c, p), 0.0, &mut cols);
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        col2im(&cols, &g, dst);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_exact_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[co]);
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (xs, ws) = (x.shape(), w.shape());
    let (g, oh, ow) = transposed_geometry(xs, ws, stride, pad)?;
    let wt = weight_in_major(w);
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * oh * ow;
    let mut dx = Tensor::zeros(xs);
    let mut dwt = vec![0.0; wt.len()];
    let mut db = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    let mut gcols = vec![0.0; k * p];
    for n in 0..xs.n {
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        let go = &gout[n * out_per..(n + 1) * out_per];
        for (co, chunk) in go.chunks_exact(oh * ow).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        im2col(go, &g, &mut gcols);
        gemm(
            Mat::new(&wt, xs.c, k),
            Mat::new(&gcols, k, p),
            0.0,
            &mut dx.data_mut()[n * in_per..(n + 1) * in_per],
        );
        gemm(Mat::new(img, xs.c, p), Mat::t(&gcols, k, p), 1.0, &mut dwt);
    }
    // Back to (out_c, in_c, kh, kw).
    let kk = ws.h * ws.w;
    let mut dw = Tensor::zeros(ws);
    for co in 0..ws.n {
        for ci in 0..ws.c {
            dw.data_mut()[(co * ws.c + ci) * kk..(co * ws.c + ci + 1) * kk]
                .copy_from_slice(&dwt[ci * ws.n * kk + co * kk..ci * ws.n * kk + (co + 1) * kk]);
        }
    }
    Ok(ConvGrads {
        x: dx,
        w: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, independent of im2col/GEMM.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * p - ws.h) / s + 1;
        let ow = (xs.w + 2 * p - ws.w) / s + 1;
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < xs.h
                                        && (ix as usize) < xs.w
                                    {
                                        acc += x.at(n, ci, iy as usize, ix as usize)
                                            * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    /// Scatter-add transposed convolution oracle.
    fn deconv_oracle(x: &Tensor, w: &Tensor, s: usize, p: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h - 1) * s + ws.h - 2 * p;
        let ow = (xs.w - 1) * s + ws.w - 2 * p;
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for ci in 0..xs.c {
                for iy in 0..xs.h {
                    for ix in 0..xs.w {
                        for co in 0..ws.n {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let oy = (iy * s + ky) as isize - p as isize;
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    if oy >= 0
                                        && ox >= 0
                                        && (oy as usize) < oh
                                        && (ox as usize) < ow
                                    {
                                        let i = out.index(n, co, oy as usize, ox as usize);
                                        out.data_mut()[i] +=
                                            x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
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
    fn scalar_kernel_scales() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(Shape::new(1, 1, 1, 1))), 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_center_is_45() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        assert_eq!(y, conv_oracle(&x, &w, None, 1, 1));
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(Shape::new(2, 1, 4, 5), -3.0, 3.0, &mut rng);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(Shape::new(1, 1, 1, 1))), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (s, p, k) in [(1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 2)] {
            let x = Tensor::uniform(Shape::new(2, 3, 9, 8), -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(Shape::new(4, 3, k, k), -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(Shape::new(1, 4, 1, 1), -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let want = conv_oracle(&x, &w, Some(&b), s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let msg = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("1x2x4x4") && msg.contains("1x3x3x3"), "{msg}");
    }

    #[test]
    fn deconv_ones_kernel_upsamples_blocks() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let y = transposed_conv2d(&x, &w, None, 2, 0).unwrap();
        let want = [
            1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.,
        ];
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn deconv_identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let id =
            transposed_conv2d(&x, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0), None, 1, 0).unwrap();
        assert_eq!(id.data(), x.data());
        let z = transposed_conv2d(&x, &Tensor::zeros(Shape::new(2, 1, 4, 4)), None, 2, 1).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 2, 6, 6));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (s, p, k) in [(2, 1, 4), (2, 0, 2), (1, 1, 3), (3, 1, 3)] {
            let x = Tensor::uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(Shape::new(2, 3, k, k), -1.0, 1.0, &mut rng);
            let got = transposed_conv2d(&x, &w, None, s, p).unwrap();
            let want = deconv_oracle(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn deconv_rejects_nonpositive_output() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let w = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(transposed_conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> for the bias-free maps.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let cx = conv2d(&x, &w, None, 2, 1).unwrap();
        let y = Tensor::uniform(cx.shape(), -1.0, 1.0, &mut rng);
        // transposed conv maps out_c -> in_c, so swap the kernel's channel axes.
        let mut wt = Tensor::zeros(Shape::new(3, 2, 4, 4));
        for co in 0..2 {
            for ci in 0..3 {
                for ky in 0..4 {
                    for kx in 0..4 {
                        wt.set(ci, co, ky, kx, w.at(co, ci, ky, kx));
                    }
                }
            }
        }
        let ty = transposed_conv2d(&y, &wt, None, 2, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
