//! Spatial operations: zero-padded strided convolution (im2col + GEMM),
//! fixed-kernel Sobel magnitude with replicate padding, and bilinear
//! resampling.

use super::ops::reshape;
use super::{Arr, Tensor};
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix1, Ix2, Ix4};

pub(crate) const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// The two fixed Sobel correlation masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobelKernel {
    X,
    Y,
}

impl SobelKernel {
    pub fn mask(self) -> &'static [[f64; 3]; 3] {
        match self {
            SobelKernel::X => &SOBEL_X,
            SobelKernel::Y => &SOBEL_Y,
        }
    }
}

/// Replicate-padded Sobel correlation of one channel plane.
pub fn correlate3x3_replicate_pub(img: &ArrayView2<'_, f64>, k: SobelKernel) -> Array2<f64> {
    correlate3x3_replicate(img, k.mask())
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col(x: &Arr, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, cin, h, w) = x4.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let ckk = cin * kh * kw;
    let xs = x4.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut col = Array2::<f64>::zeros((b * oh * ow, ckk));
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..cin {
                    let plane = (bi * cin + ci) * h;
                    for u in 0..kh {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (plane + iy as usize) * w;
                        let dst = row + (ci * kh + u) * kw;
                        for v in 0..kw {
                            let ix = (ox * stride + v) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst + v] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    (b, cin, h, w): (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let ckk = cin * kh * kw;
    let mut dx = Array4::<f64>::zeros((b, cin, h, w));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcol.as_slice().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * ckk;
                for ci in 0..cin {
                    let plane = (bi * cin + ci) * h;
                    for u in 0..kh {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (plane + iy as usize) * w;
                        let src = row + (ci * kh + u) * kw;
                        for v in 0..kw {
                            let ix = (ox * stride + v) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            ds[dst + ix as usize] += cs[src + v];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Zero-padded strided 2-D convolution of `[B, Cin, H, W]` with weights
/// `[Cout, Cin, kh, kw]` and optional bias `[Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let x_shape = x.shape();
    let w_shape = w.shape();
    assert_eq!(x_shape.len(), 4, "conv2d: input must be [B, C, H, W]");
    assert_eq!(w_shape.len(), 4, "conv2d: weight must be [Cout, Cin, kh, kw]");
    assert_eq!(x_shape[1], w_shape[1], "conv2d: channel mismatch");
    let (bsz, cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let ckk = cin * kh * kw;

    let col = im2col(&x.value(), kh, kw, stride, pad);
    let wv = w.value();
    let w2 = wv.to_shape((cout, ckk)).unwrap();
    let w2 = w2.view().into_dimensionality::<Ix2>().unwrap();
    let mut y2 = col.dot(&w2.t());
    if let Some(b) = b {
        let bv = b.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        y2 += &b1;
    }
    drop(wv);
    let y = reshape(y2.into_dyn(), &[bsz, oh, ow, cout]);
    let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
    let value = y4.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();

    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    Tensor::from_op(parents, value.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let gp = g4.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
        let g2 = reshape(gp.into_dyn(), &[bsz * oh * ow, cout]);
        let g2 = g2.view().into_dimensionality::<Ix2>().unwrap();

        // The column matrix is rebuilt here rather than captured: it is the
        // largest transient of the whole pass.
        let col = im2col(&px.value(), kh, kw, stride, pad);
        let dw2 = g2.t().dot(&col); // [Cout, CKK]
        let dw = reshape(dw2.as_standard_layout().to_owned().into_dyn(), &[cout, cin, kh, kw]);
        let db = if has_bias {
            Some(g2.sum_axis(Axis(0)).into_dyn())
        } else {
            None
        };
        let wv = pw.value();
        let w2 = wv.to_shape((cout, ckk)).unwrap();
        let w2 = w2.view().into_dimensionality::<Ix2>().unwrap();
        let dcol = g2.dot(&w2);
        let dx = col2im(&dcol, (bsz, cin, h, wd), kh, kw, stride, pad);
        let mut out = vec![Some(dx.into_dyn()), Some(dw)];
        if has_bias {
            out.push(db);
        }
        out
    })
}

/// Replicate-padded correlation of one channel with a fixed 3x3 kernel.
pub(crate) fn correlate3x3_replicate(img: &ArrayView2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (u, krow) in k.iter().enumerate() {
                let iy = clamp(i as isize + u as isize - 1, h);
                for (v, &kv) in krow.iter().enumerate() {
                    let ix = clamp(j as isize + v as isize - 1, w);
                    acc += kv * img[[iy, ix]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Adjoint of `correlate3x3_replicate` (scatter with border folding).
fn correlate3x3_replicate_adjoint(dg: &ArrayView2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = dg.dim();
    let mut padded = Array2::<f64>::zeros((h + 2, w + 2));
    for i in 0..h {
        for j in 0..w {
            let gv = dg[[i, j]];
            if gv == 0.0 {
                continue;
            }
            for (u, krow) in k.iter().enumerate() {
                for (v, &kv) in krow.iter().enumerate() {
                    padded[[i + u, j + v]] += gv * kv;
                }
            }
        }
    }
    let mut dx = Array2::<f64>::zeros((h, w));
    for p in 0..h + 2 {
        let sy = (p as isize - 1).clamp(0, h as isize - 1) as usize;
        for q in 0..w + 2 {
            let sx = (q as isize - 1).clamp(0, w as isize - 1) as usize;
            dx[[sy, sx]] += padded[[p, q]];
        }
    }
    dx
}

/// Per-channel Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)` of a
/// `[B, C, H, W]` map, differentiable with a zero subgradient where the
/// magnitude vanishes.
pub fn sobel_magnitude_op(x: &Tensor) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    assert!(h >= 3 && w >= 3, "sobel: spatial size must be at least 3x3");
    let mut gx = Array4::<f64>::zeros((b, c, h, w));
    let mut gy = Array4::<f64>::zeros((b, c, h, w));
    let mut mag = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let img = x4.index_axis(Axis(0), bi);
            let img = img.index_axis(Axis(0), ci);
            let cx = correlate3x3_replicate(&img, &SOBEL_X);
            let cy = correlate3x3_replicate(&img, &SOBEL_Y);
            let mut m = mag.index_axis_mut(Axis(0), bi);
            let mut m = m.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut m).and(&cx).and(&cy).for_each(|mm, &a, &bb| {
                *mm = (a * a + bb * bb).sqrt();
            });
            gx.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ci).assign(&cx);
            gy.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ci).assign(&cy);
        }
    }
    drop(xs);
    let value = mag.clone().into_dyn();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let gs = g4.index_axis(Axis(0), bi);
                let gs = gs.index_axis(Axis(0), ci);
                let mut dgx = Array2::<f64>::zeros((h, w));
                let mut dgy = Array2::<f64>::zeros((h, w));
                for i in 0..h {
                    for j in 0..w {
                        let m = mag[[bi, ci, i, j]];
                        if m > 0.0 {
                            let gv = gs[[i, j]] / m;
                            dgx[[i, j]] = gv * gx[[bi, ci, i, j]];
                            dgy[[i, j]] = gv * gy[[bi, ci, i, j]];
                        }
                    }
                }
                let ax = correlate3x3_replicate_adjoint(&dgx.view(), &SOBEL_X);
                let ay = correlate3x3_replicate_adjoint(&dgy.view(), &SOBEL_Y);
                let mut d = dx.index_axis_mut(Axis(0), bi);
                let mut d = d.index_axis_mut(Axis(0), ci);
                d.assign(&(&ax + &ay));
            }
        }
        vec![Some(dx.into_dyn())]
    })
}

/// Precomputed 1-D bilinear sample map (align_corners = false).
fn bilinear_axis_map(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0 as isize).clamp(0, in_len as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (a, b, frac)
        })
        .collect()
}

/// Bilinear resize of `[B, C, H, W]` to `(out_h, out_w)`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let ymap = bilinear_axis_map(h, out_h);
    let xmap = bilinear_axis_map(w, out_w);
    let mut out = Array4::<f64>::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            let img = x4.index_axis(Axis(0), bi);
            let img = img.index_axis(Axis(0), ci);
            let mut o = out.index_axis_mut(Axis(0), bi);
            let mut o = o.index_axis_mut(Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                    o[[oy, ox]] = (1.0 - fy) * (1.0 - fx) * img[[y0, x0]]
                        + (1.0 - fy) * fx * img[[y0, x1]]
                        + fy * (1.0 - fx) * img[[y1, x0]]
                        + fy * fx * img[[y1, x1]];
                }
            }
        }
    }
    drop(xs);
    Tensor::from_op(vec![x.clone()], out.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let gs = g4.index_axis(Axis(0), bi);
                let gs = gs.index_axis(Axis(0), ci);
                let mut d = dx.index_axis_mut(Axis(0), bi);
                let mut d = d.index_axis_mut(Axis(0), ci);
                for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                        let gv = gs[[oy, ox]];
                        d[[y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                        d[[y0, x1]] += (1.0 - fy) * fx * gv;
                        d[[y1, x0]] += fy * (1.0 - fx) * gv;
                        d[[y1, x1]] += fy * fx * gv;
                    }
                }
            }
        }
        vec![Some(dx.into_dyn())]
    })
}
