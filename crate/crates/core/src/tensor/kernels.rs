use super::{Scalar, Tensor};
use crate::error::{FamError, Result};

/// Standard matrix product of `[m, k]` by `[k, n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = as_matrix(a, "matmul", b)?;
    let (k2, n) = as_matrix(b, "matmul", a)?;
    if k != k2 {
        return Err(FamError::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · g` for `a: [m, k]`, `g: [m, n]`.
pub(crate) fn matmul_tn<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![S::zero(); k * n];
    let (ad, gd) = (a.data(), g.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// `g · bᵀ` for `g: [m, n]`, `b: [k, n]`.
pub(crate) fn matmul_nt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![S::zero(); m * k];
    let (gd, bd) = (g.data(), b.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    Tensor {
        shape: vec![m, k],
        data: out,
    }
}

fn as_matrix<S: Scalar>(t: &Tensor<S>, op: &'static str, other: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        _ => Err(FamError::Dimension {
            op,
            left: t.shape().to_vec(),
            right: other.shape().to_vec(),
        }),
    }
}

/// Splits `[C,H,W]` or `[B,C,H,W]` into `(B, C, H, W)`.
pub(crate) fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

fn with_channels(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let idx = out.len() - 3;
    out[idx] = channels;
    out
}

/// 3×3 cross-correlation with stride 1 and zero padding 1.
///
/// Accepts a single image `[C,H,W]` or a batch `[B,C,H,W]`; kernels are
/// `[F,C,3,3]`. Spatial dimensions are preserved.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>) -> Result<Tensor<S>> {
    let (f, c, h, w) = conv_check(input, kernels)?;
    let (b, ..) = image_dims(input.shape()).unwrap();
    let (x, k) = (input.data(), kernels.data());
    let mut out = vec![S::zero(); b * f * h * w];
    for bi in 0..b {
        for fi in 0..f {
            let o_off = (bi * f + fi) * h * w;
            for ci in 0..c {
                let x_off = (bi * c + ci) * h * w;
                let k_off = (fi * c + ci) * 9;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = k[k_off + dy * 3 + dx];
                        // output (y, xx) reads input (y + dy - 1, xx + dx - 1)
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            let orow = &mut out[o_off + y * w..o_off + (y + 1) * w];
                            let irow = &x[x_off + iy * w..x_off + (iy + 1) * w];
                            for xx in x0..x1 {
                                orow[xx] += kv * irow[xx + dx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(with_channels(input.shape(), f), out)
}

/// Output positions for which `pos + d - 1` lies inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

fn conv_check<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
) -> Result<(usize, usize, usize, usize)> {
    let err = || FamError::Dimension {
        op: "conv2d",
        left: input.shape().to_vec(),
        right: kernels.shape().to_vec(),
    };
    let (_, c, h, w) = image_dims(input.shape()).ok_or_else(err)?;
    match *kernels.shape() {
        [f, kc, 3, 3] if kc == c => Ok((f, c, h, w)),
        _ => Err(err()),
    }
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (b, c, h, w) = image_dims(input.shape()).unwrap();
    let f = kernels.shape()[0];
    let (x, k, g) = (input.data(), kernels.data(), grad_out.data());
    let mut gx = vec![S::zero(); x.len()];
    let mut gk = vec![S::zero(); k.len()];
    for bi in 0..b {
        for fi in 0..f {
            let o_off = (bi * f + fi) * h * w;
            for ci in 0..c {
                let x_off = (bi * c + ci) * h * w;
                let k_off = (fi * c + ci) * 9;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = k[k_off + dy * 3 + dx];
                        let mut acc = S::zero();
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            for xx in x0..x1 {
                                let gv = g[o_off + y * w + xx];
                                let xi = x_off + iy * w + xx + dx - 1;
                                acc += gv * x[xi];
                                gx[xi] += gv * kv;
                            }
                        }
                        gk[k_off + dy * 3 + dx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: input.shape().to_vec(),
            data: gx,
        },
        Tensor {
            shape: kernels.shape().to_vec(),
            data: gk,
        },
    )
}

/// Pooled size of a spatial dimension: halves with floor, but never below 1.
pub fn pooled_dim(d: usize) -> usize {
    (d / 2).max(1)
}

/// 2×2 max pooling with stride 2 over `[C,H,W]` or `[B,C,H,W]`.
///
/// Windows are clipped to the input, so a dimension of size 1 passes through.
/// Returns the pooled tensor and, per output entry, the flat input index that
/// produced it (first maximum wins on ties).
pub fn max_pool_2x2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (b, c, h, w) = image_dims(input.shape()).ok_or_else(|| FamError::Dimension {
        op: "max_pool_2x2",
        left: input.shape().to_vec(),
        right: vec![2, 2],
    })?;
    let (oh, ow) = (pooled_dim(h), pooled_dim(w));
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let off = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = off + 2 * oy * w + 2 * ox;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = off + iy * w + ix;
                        if x[idx].re() > x[best].re() {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

/// Row-wise softmax of a `[rows, classes]` matrix.
pub fn softmax(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (rows, cols) = match *logits.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(FamError::Dimension {
                op: "softmax",
                left: logits.shape().to_vec(),
                right: vec![],
            })
        }
    };
    let mut out = Vec::with_capacity(rows * cols);
    for row in logits.data().chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(vec![rows, cols], out)
}
