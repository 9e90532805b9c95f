//! Differentiable array operations.
//!
//! Shape requirements are `assert!`ed: network composition guarantees them,
//! and the user-facing entry points validate their inputs before building
//! any graph.

use super::{Arr, Tensor};
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2, Ix3, Ix4, IxDyn};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes differ ({:?} vs {:?})",
        a.shape(),
        b.shape()
    );
}

/// Reshapes an owned dynamic array; copies only if non-contiguous.
pub(crate) fn reshape(a: Arr, shape: &[usize]) -> Arr {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    };
    a.into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

fn view2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let value = &*a.value() + &*b.value();
    Tensor::from_op(vec![a.clone(), b.clone()], value, |g| {
        vec![Some(g.clone()), Some(g.clone())]
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let value = &*a.value() - &*b.value();
    Tensor::from_op(vec![a.clone(), b.clone()], value, |g| {
        vec![Some(g.clone()), Some(-g)]
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let value = &*a.value() * &*b.value();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(vec![a.clone(), b.clone()], value, move |g| {
        let ga = g * &*pb.value();
        let gb = g * &*pa.value();
        vec![Some(ga), Some(gb)]
    })
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let value = x.value().mapv(|v| v * c);
    Tensor::from_op(vec![x.clone()], value, move |g| vec![Some(g * c)])
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    let value = x.value().mapv(|v| v + c);
    Tensor::from_op(vec![x.clone()], value, |g| vec![Some(g.clone())])
}

pub fn neg(x: &Tensor) -> Tensor {
    scale(x, -1.0)
}

pub fn abs(x: &Tensor) -> Tensor {
    let value = x.value().mapv(f64::abs);
    let px = x.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let sign = px
            .value()
            .mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        vec![Some(g * &sign)]
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let value = x.value().mapv(|v| v.max(0.0));
    let px = x.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let mask = px.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        vec![Some(g * &mask)]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let value = x
        .value()
        .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v.powi(3))).tanh()));
    let px = x.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let d = px.value().mapv(|v| {
            let u = GELU_C * (v + GELU_A * v.powi(3));
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        });
        vec![Some(g * &d)]
    })
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let value = x.value().mapv(sigmoid_scalar);
    let y = value.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let d = y.mapv(|v| v * (1.0 - v));
        vec![Some(g * &d)]
    })
}

pub fn softplus(x: &Tensor) -> Tensor {
    let value = x.value().mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
    let px = x.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let d = px.value().mapv(sigmoid_scalar);
        vec![Some(g * &d)]
    })
}

/// Square root with a zero subgradient at zero (used on sums of squares).
pub fn sqrt_guarded(x: &Tensor) -> Tensor {
    let value = x.value().mapv(|v| v.max(0.0).sqrt());
    let y = value.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let mut d = y;
        d.mapv_inplace(|v| if v > 0.0 { 0.5 / v } else { 0.0 });
        vec![Some(g * &d)]
    })
}

pub fn square(x: &Tensor) -> Tensor {
    let value = x.value().mapv(|v| v * v);
    let px = x.clone();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        vec![Some(g * &px.value().mapv(|v| 2.0 * v))]
    })
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let value = super::scalar_arr(x.value().sum());
    let shape = x.shape();
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let s = *g.iter().next().unwrap();
        vec![Some(Arr::from_elem(IxDyn(&shape), s))]
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.len() as f64;
    scale(&sum_all(x), 1.0 / n)
}

/// `x [..., C] @ w [C, F] (+ b [F])`, flattening all leading axes.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xs = x.value();
    let x_shape = xs.shape().to_vec();
    let c = *x_shape.last().expect("linear: input must have an axis");
    let m: usize = x_shape[..x_shape.len() - 1].iter().product();
    let w_shape = w.shape();
    assert_eq!(w_shape[0], c, "linear: weight rows must match input channels");
    let f = w_shape[1];

    let x2 = xs.to_shape((m, c)).expect("linear: reshape");
    let mut y2 = x2.dot(&view2(&w.value()));
    if let Some(b) = b {
        let bv = b.value();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y2 += &b1;
    }
    drop(xs);
    let mut out_shape = x_shape.clone();
    *out_shape.last_mut().unwrap() = f;
    let value = reshape(y2.into_dyn(), &out_shape);

    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    Tensor::from_op(parents, value, move |g| {
        let g_std = g.as_standard_layout();
        let g2 = g_std.to_shape((m, f)).unwrap();
        let g2 = g2.view().into_dimensionality::<Ix2>().unwrap();
        let xs = px.value();
        let x2 = xs.to_shape((m, c)).unwrap();
        let x2 = x2.view().into_dimensionality::<Ix2>().unwrap();
        let wv = pw.value();
        let w2 = view2(&wv);

        let dx2 = g2.dot(&w2.t());
        let dw = x2.t().dot(&g2);
        let db = if has_bias {
            Some(g2.sum_axis(Axis(0)).into_dyn())
        } else {
            None
        };
        drop(xs);
        let dx = reshape(dx2.into_dyn(), &x_shape);
        let mut out = vec![Some(dx), Some(dw.into_dyn())];
        if has_bias {
            out.push(db);
        }
        out
    })
}

/// Layer normalization over the last axis with learnable gain and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let xs = x.value();
    let shape = xs.shape().to_vec();
    let c = *shape.last().unwrap();
    assert_eq!(gamma.len(), c, "layer_norm: gamma length");
    assert_eq!(beta.len(), c, "layer_norm: beta length");
    let m: usize = shape[..shape.len() - 1].iter().product();
    let x2 = xs.to_shape((m, c)).unwrap();

    let mut xhat = Array2::<f64>::zeros((m, c));
    let mut inv_std = Array1::<f64>::zeros(m);
    for i in 0..m {
        let row = x2.row(i);
        let mu = row.mean().unwrap();
        let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..c {
            xhat[[i, j]] = (row[j] - mu) * istd;
        }
    }
    let gv = gamma.value();
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let bv = beta.value();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let mut y = xhat.clone();
    y *= &g1;
    y += &b1;
    drop(xs);
    drop(gv);
    drop(bv);
    let value = reshape(y.into_dyn(), &shape);

    let pg = gamma.clone();
    Tensor::from_op(
        vec![x.clone(), gamma.clone(), beta.clone()],
        value,
        move |g| {
            let g_std = g.as_standard_layout();
            let g2 = g_std.to_shape((m, c)).unwrap();
            let gv = pg.value();
            let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();

            let mut dx = Array2::<f64>::zeros((m, c));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for i in 0..m {
                let grow = g2.row(i);
                let xrow = xhat.row(i);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..c {
                    let dxh = grow[j] * g1[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xrow[j];
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                }
                mean_dxhat /= c as f64;
                mean_dxhat_xhat /= c as f64;
                for j in 0..c {
                    let dxh = grow[j] * g1[j];
                    dx[[i, j]] = inv_std[i] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                }
            }
            vec![
                Some(reshape(dx.into_dyn(), &shape)),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        },
    )
}

/// Per-sample normalization of a `[B, C, H, W]` map over all of (C, H, W),
/// with per-channel gain and shift. Stateless (no running statistics).
pub fn norm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (bsz, c, h, w) = x4.dim();
    assert_eq!(gamma.len(), c, "norm2d: gamma length");
    let n = (c * h * w) as f64;

    let mut xhat = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
    let mut inv_std = Array1::<f64>::zeros(bsz);
    for bi in 0..bsz {
        let sample = x4.index_axis(Axis(0), bi);
        let mu = sample.sum() / n;
        let var = sample.mapv(|v| (v - mu) * (v - mu)).sum() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[bi] = istd;
        let mut out = xhat.index_axis_mut(Axis(0), bi);
        out.assign(&sample.mapv(|v| (v - mu) * istd));
    }
    let gv = gamma.value();
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let bv = beta.value();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let mut y = xhat.clone();
    for ci in 0..c {
        let mut lane = y.index_axis_mut(Axis(1), ci);
        lane.mapv_inplace(|v| v * g1[ci] + b1[ci]);
    }
    drop(xs);
    drop(gv);
    drop(bv);

    let pg = gamma.clone();
    Tensor::from_op(
        vec![x.clone(), gamma.clone(), beta.clone()],
        y.into_dyn(),
        move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gv = pg.value();
            let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();

            let mut dx = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for bi in 0..bsz {
                let gs = g4.index_axis(Axis(0), bi);
                let xh = xhat.index_axis(Axis(0), bi);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            let dxh = gs[[ci, yi, xi]] * g1[ci];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[[ci, yi, xi]];
                            dgamma[ci] += gs[[ci, yi, xi]] * xh[[ci, yi, xi]];
                            dbeta[ci] += gs[[ci, yi, xi]];
                        }
                    }
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            let dxh = gs[[ci, yi, xi]] * g1[ci];
                            dx[[bi, ci, yi, xi]] = inv_std[bi]
                                * (dxh - mean_dxhat - xh[[ci, yi, xi]] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            vec![
                Some(dx.into_dyn()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        },
    )
}

/// Row softmax over the last axis (max-subtracted for stability).
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let xs = x.value();
    let shape = xs.shape().to_vec();
    let c = *shape.last().unwrap();
    let m: usize = shape[..shape.len() - 1].iter().product();
    let x2 = xs.to_shape((m, c)).unwrap();
    let mut y = Array2::<f64>::zeros((m, c));
    for i in 0..m {
        let row = x2.row(i);
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            y[[i, j]] = e;
            sum += e;
        }
        for j in 0..c {
            y[[i, j]] /= sum;
        }
    }
    drop(xs);
    let y_keep = y.clone();
    let value = reshape(y.into_dyn(), &shape);
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let g_std = g.as_standard_layout();
        let g2 = g_std.to_shape((m, c)).unwrap();
        let mut dx = Array2::<f64>::zeros((m, c));
        for i in 0..m {
            let yrow = y_keep.row(i);
            let grow = g2.row(i);
            let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dx[[i, j]] = yrow[j] * (grow[j] - dot);
            }
        }
        vec![Some(reshape(dx.into_dyn(), &shape))]
    })
}

/// Concatenates `[B, C_i, H, W]` maps along the channel axis.
pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let values: Vec<_> = xs.iter().map(|t| t.to_array()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = ndarray::concatenate(Axis(1), &views).expect("concat_channels");
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    let parents: Vec<Tensor> = xs.iter().map(|t| (*t).clone()).collect();
    Tensor::from_op(parents, value, move |g| {
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &wd in &widths {
            let slice = g
                .slice_axis(Axis(1), ndarray::Slice::from(start..start + wd))
                .to_owned();
            out.push(Some(slice));
            start += wd;
        }
        out
    })
}

/// `[B, C, H, W] -> [B, H*W, C]` token layout.
pub fn nchw_to_tokens(x: &Tensor) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let perm = x4.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
    drop(xs);
    let value = reshape(perm.into_dyn(), &[b, h * w, c]);
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let g_std = g.as_standard_layout().to_owned();
        let g4 = reshape(g_std, &[b, h, w, c]);
        let g4 = g4.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let dx = g4.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
        vec![Some(dx.into_dyn())]
    })
}

/// `[B, N, C] -> [B, C, H, W]` with `N = h*w`.
pub fn tokens_to_nchw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let xs = x.value();
    let x3 = xs.view().into_dimensionality::<Ix3>().unwrap();
    let (b, n, c) = x3.dim();
    assert_eq!(n, h * w, "tokens_to_nchw: N must equal h*w");
    let x4 = xs.to_shape((b, h, w, c)).unwrap().to_owned();
    let value = x4.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
    drop(xs);
    Tensor::from_op(vec![x.clone()], value.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let gp = g4.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
        vec![Some(reshape(gp.into_dyn(), &[b, n, c]))]
    })
}

/// `[B, N, C] -> [B, heads, N, C/heads]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let xs = x.value();
    let x3 = xs.view().into_dimensionality::<Ix3>().unwrap();
    let (b, n, c) = x3.dim();
    assert_eq!(c % heads, 0, "split_heads: channels not divisible by heads");
    let dh = c / heads;
    let x4 = xs.to_shape((b, n, heads, dh)).unwrap().to_owned();
    let value = x4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
    drop(xs);
    Tensor::from_op(vec![x.clone()], value.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let gp = g4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
        vec![Some(reshape(gp.into_dyn(), &[b, n, c]))]
    })
}

/// `[B, heads, N, dh] -> [B, N, heads*dh]`.
pub fn merge_heads(x: &Tensor) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, heads, n, dh) = x4.dim();
    let perm = x4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
    drop(xs);
    let value = reshape(perm.into_dyn(), &[b, n, heads * dh]);
    Tensor::from_op(vec![x.clone()], value, move |g| {
        let g_std = g.as_standard_layout().to_owned();
        let g4 = reshape(g_std, &[b, n, heads, dh]);
        let g4 = g4.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let dx = g4.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned();
        vec![Some(dx.into_dyn())]
    })
}

fn batched_matmul(
    a: &Arr,
    b: &Arr,
    transpose_b: bool,
) -> Arr {
    let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
    let b4 = b.view().into_dimensionality::<Ix4>().unwrap();
    let (ba, ha, n, k) = a4.dim();
    let (bb, hb, r0, r1) = b4.dim();
    assert_eq!((ba, ha), (bb, hb), "batched_matmul: batch/head mismatch");
    let m = if transpose_b {
        assert_eq!(r1, k, "batched_matmul: inner dims");
        r0
    } else {
        assert_eq!(r0, k, "batched_matmul: inner dims");
        r1
    };
    let mut out = ndarray::Array4::<f64>::zeros((ba, ha, n, m));
    for bi in 0..ba {
        for hi in 0..ha {
            let av = a4.index_axis(Axis(0), bi);
            let av = av.index_axis(Axis(0), hi);
            let bv = b4.index_axis(Axis(0), bi);
            let bv = bv.index_axis(Axis(0), hi);
            let prod = if transpose_b {
                av.dot(&bv.t())
            } else {
                av.dot(&bv)
            };
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), hi)
                .assign(&prod);
        }
    }
    out.into_dyn()
}

/// Batched matmul `[B, H, N, K] @ [B, H, K, M] -> [B, H, N, M]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let value = batched_matmul(&a.value(), &b.value(), false);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(vec![a.clone(), b.clone()], value, move |g| {
        // da = g @ b^T ; db = a^T @ g
        let da = batched_matmul(g, &pb.value(), true);
        let bv = pa.value();
        let a4 = bv.view().into_dimensionality::<Ix4>().unwrap();
        let (bb, hh, n, k) = a4.dim();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let m = g4.dim().3;
        let mut db = ndarray::Array4::<f64>::zeros((bb, hh, k, m));
        for bi in 0..bb {
            for hi in 0..hh {
                let av = a4.index_axis(Axis(0), bi);
                let av = av.index_axis(Axis(0), hi);
                let gv = g4.index_axis(Axis(0), bi);
                let gv = gv.index_axis(Axis(0), hi);
                db.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), hi)
                    .assign(&av.t().dot(&gv));
            }
        }
        let _ = n;
        vec![Some(da), Some(db.into_dyn())]
    })
}

/// Batched matmul with transposed right operand:
/// `[B, H, N, K] @ [B, H, M, K]^T -> [B, H, N, M]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let value = batched_matmul(&a.value(), &b.value(), true);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(vec![a.clone(), b.clone()], value, move |g| {
        // da = g @ b ; db = g^T @ a
        let da = batched_matmul(g, &pb.value(), false);
        let av_all = pa.value();
        let a4 = av_all.view().into_dimensionality::<Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (bb, hh, _n, k) = a4.dim();
        let m = g4.dim().3;
        let mut db = ndarray::Array4::<f64>::zeros((bb, hh, m, k));
        for bi in 0..bb {
            for hi in 0..hh {
                let av = a4.index_axis(Axis(0), bi);
                let av = av.index_axis(Axis(0), hi);
                let gv = g4.index_axis(Axis(0), bi);
                let gv = gv.index_axis(Axis(0), hi);
                db.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), hi)
                    .assign(&gv.t().dot(&av));
            }
        }
        vec![Some(da), Some(db.into_dyn())]
    })
}

/// Adaptive average pooling of `[B, H, N, D]` tokens to `[B, H, n, D]`
/// using contiguous bins (bin i covers `[floor(iN/n), ceil((i+1)N/n))`).
pub fn pool_tokens_adaptive(x: &Tensor, n_out: usize) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, h, n, d) = x4.dim();
    assert!(n_out >= 1 && n_out <= n, "pool_tokens_adaptive: need 1 <= n_out <= N");
    let bins: Vec<(usize, usize)> = (0..n_out)
        .map(|i| {
            let start = i * n / n_out;
            let end = ((i + 1) * n).div_ceil(n_out);
            (start, end)
        })
        .collect();
    let mut out = ndarray::Array4::<f64>::zeros((b, h, n_out, d));
    for bi in 0..b {
        for hi in 0..h {
            for (i, &(s, e)) in bins.iter().enumerate() {
                let len = (e - s) as f64;
                for di in 0..d {
                    let mut acc = 0.0;
                    for j in s..e {
                        acc += x4[[bi, hi, j, di]];
                    }
                    out[[bi, hi, i, di]] = acc / len;
                }
            }
        }
    }
    drop(xs);
    Tensor::from_op(vec![x.clone()], out.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = ndarray::Array4::<f64>::zeros((b, h, n, d));
        for bi in 0..b {
            for hi in 0..h {
                for (i, &(s, e)) in bins.iter().enumerate() {
                    let len = (e - s) as f64;
                    for di in 0..d {
                        let gv = g4[[bi, hi, i, di]] / len;
                        for j in s..e {
                            dx[[bi, hi, j, di]] += gv;
                        }
                    }
                }
            }
        }
        vec![Some(dx.into_dyn())]
    })
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let mut out = Array2::<f64>::zeros((b, c));
    let inv = 1.0 / (h * w) as f64;
    for bi in 0..b {
        for ci in 0..c {
            out[[bi, ci]] = x4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * inv;
        }
    }
    drop(xs);
    Tensor::from_op(vec![x.clone()], out.into_dyn(), move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                dx.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g2[[bi, ci]] * inv);
            }
        }
        vec![Some(dx.into_dyn())]
    })
}

/// Per-channel scaling: `y[b,c,h,w] = x[b,c,h,w] * s[b,c]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Tensor {
    let xs = x.value();
    let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let sv = s.value();
    let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(s2.dim(), (b, c), "scale_channels: scale shape");
    let mut out = x4.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| v * s2[[bi, ci]]);
        }
    }
    drop(xs);
    drop(sv);
    let (px, ps) = (x.clone(), s.clone());
    Tensor::from_op(vec![x.clone(), s.clone()], out.into_dyn(), move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let xs = px.value();
        let x4 = xs.view().into_dimensionality::<Ix4>().unwrap();
        let sv = ps.value();
        let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
        let mut ds = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let gview = g4.index_axis(Axis(0), bi);
                let gview = gview.index_axis(Axis(0), ci);
                let xview = x4.index_axis(Axis(0), bi);
                let xview = xview.index_axis(Axis(0), ci);
                let mut dxv = dx.index_axis_mut(Axis(0), bi);
                let mut dxv = dxv.index_axis_mut(Axis(0), ci);
                dxv.assign(&gview.mapv(|v| v * s2[[bi, ci]]));
                ds[[bi, ci]] = (&gview * &xview).sum();
            }
        }
        vec![Some(dx.into_dyn()), Some(ds.into_dyn())]
    })
}

/// Mean binary cross entropy on logits, fused for numerical stability.
/// Loss element: `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Arr) -> Tensor {
    let zs = logits.value();
    assert_eq!(zs.shape(), target.shape(), "bce_with_logits: shapes");
    let n = zs.len() as f64;
    let mut acc = 0.0;
    ndarray::Zip::from(&*zs).and(target).for_each(|&z, &y| {
        acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    });
    drop(zs);
    let value = super::scalar_arr(acc / n);
    let pl = logits.clone();
    let ty = target.clone();
    Tensor::from_op(vec![logits.clone()], value, move |g| {
        let s = *g.iter().next().unwrap() / n;
        let zs = pl.value();
        let mut dz = zs.clone();
        ndarray::Zip::from(&mut dz).and(&ty).for_each(|d, &y| {
            *d = (sigmoid_scalar(*d) - y) * s;
        });
        vec![Some(dz)]
    })
}
