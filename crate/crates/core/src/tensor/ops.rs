//! Forward kernels and their vector-Jacobian products.
//!
//! The public functions are the value-level API; the `*_backward` helpers are
//! used by the tape and take the upstream gradient `g`.

use super::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to predictions before taking logarithms in [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `(dA, dB) = (G Bᵀ, Aᵀ G)`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(g, &b.transpose()?)?;
    let db = matmul(&a.transpose()?, g)?;
    Ok((da, db))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let [rows, cols] = m.dims2("softmax_rows")?;
    let mut out = m.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

pub(crate) fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            out[r * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::from_parts(vec![rows, cols], out)
}

fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

fn check_conv(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<([usize; 3], [usize; 4])> {
    let [h, w, cin] = input.dims3("conv2d")?;
    let [kh, kw, kc, cout] = kernel.dims4("conv2d")?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::EvenKernel { kh, kw });
    }
    if kc != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    Ok(([h, w, cin], [kh, kw, kc, cout]))
}

/// Zero-padded cross-correlation. `kernel` is `(kh, kw, cin, cout)`; the output
/// is `(ceil(h / stride), ceil(w / stride), cout)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let ([h, w, cin], [kh, kw, _, cout]) = check_conv(input, kernel, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for ky in 0..kh {
                let Some(iy) = (oy * stride + ky).checked_sub(ph).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(pw).filter(|&v| v < w) else {
                        continue;
                    };
                    let irow = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &a) in irow.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ho, wo, cout], out))
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let ([h, w, cin], [kh, kw, _, cout]) = check_conv(input, kernel, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let (x, k, gd) = (input.data(), kernel.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &gd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..kh {
                let Some(iy) = (oy * stride + ky).checked_sub(ph).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(pw).filter(|&v| v < w) else {
                        continue;
                    };
                    let ibase = (iy * w + ix) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for (&kv, &gv) in krow.iter().zip(grow) {
                            acc += kv * gv;
                        }
                        dx[ibase + ci] += acc;
                        let a = x[ibase + ci];
                        if a != 0.0 {
                            let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (d, &gv) in dkrow.iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

fn check_depthwise(input: &Tensor, filters: &Tensor) -> Result<[usize; 3]> {
    let [h, w, c] = input.dims3("depthwise_conv2d")?;
    if filters.shape() != [3, 3, c] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: input.shape().to_vec(),
            rhs: filters.shape().to_vec(),
        });
    }
    Ok([h, w, c])
}

/// Per-channel 3×3 convolution, stride 1, zero padding, no bias.
pub fn depthwise_conv2d(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let [h, w, c] = check_depthwise(input, filters)?;
    let (x, f) = (input.data(), filters.data());
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let obase = (y * w + xx) * c;
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let ibase = (iy * w + ix) * c;
                    let fbase = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        out[obase + ch] += x[ibase + ch] * f[fbase + ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub(crate) fn depthwise_conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [h, w, c] = check_depthwise(input, filters)?;
    let (x, f, gd) = (input.data(), filters.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut df = vec![0.0; f.len()];
    for y in 0..h {
        for xx in 0..w {
            let obase = (y * w + xx) * c;
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let ibase = (iy * w + ix) * c;
                    let fbase = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        let gv = gd[obase + ch];
                        dx[ibase + ch] += gv * f[fbase + ch];
                        df[fbase + ch] += gv * x[ibase + ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(filters.shape().to_vec(), df),
    ))
}

fn check_pool(x: &Tensor, mask: &Tensor) -> Result<([usize; 3], f64)> {
    let [h, w, c] = x.dims3("masked_avg_pool")?;
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "masked_avg_pool",
            lhs: x.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let total = mask.sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion);
    }
    Ok(([h, w, c], total))
}

/// Mean of the channel vectors under a `{0, 1}` mask.
pub fn masked_avg_pool(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let ([h, w, c], total) = check_pool(x, mask)?;
    let mut out = vec![0.0; c];
    for p in 0..h * w {
        let m = mask.data()[p];
        if m == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&x.data()[p * c..(p + 1) * c]) {
            *o += m * v;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(Tensor::from_parts(vec![c], out))
}

pub(crate) fn masked_avg_pool_backward(x: &Tensor, mask: &Tensor, g: &Tensor) -> Result<Tensor> {
    let ([h, w, c], total) = check_pool(x, mask)?;
    let mut dx = vec![0.0; x.len()];
    for p in 0..h * w {
        let m = mask.data()[p] / total;
        if m == 0.0 {
            continue;
        }
        for (d, &gv) in dx[p * c..(p + 1) * c].iter_mut().zip(g.data()) {
            *d = m * gv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Source taps for one output coordinate of the half-pixel 2× upsampler.
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2× upsampling with half-pixel sample centers: output coordinate
/// `o` reads input coordinate `(o + 0.5) / 2 - 0.5`, clamped to the border.
pub fn bilinear_upsample_x2(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("bilinear_upsample_x2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..wo {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let obase = (oy * wo + ox) * c;
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[obase + ch] += wt * xd[base + ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ho, wo, c], out))
}

pub(crate) fn bilinear_upsample_x2_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("bilinear_upsample_x2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let gd = g.data();
    let mut dx = vec![0.0; x.len()];
    for oy in 0..ho {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..wo {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let obase = (oy * wo + ox) * c;
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    dx[base + ch] += wt * gd[obase + ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

fn check_bce(pred: &Tensor, target: &Tensor) -> Result<()> {
    pred.expect_same_shape(target, "bce_loss")
}

/// Mean binary cross-entropy with predictions clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_bce(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// d(bce)/d(pred); zero where the clamp is active.
pub(crate) fn bce_loss_backward(pred: &Tensor, target: &Tensor, g: f64) -> Result<Tensor> {
    check_bce(pred, target)?;
    let n = pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return 0.0;
            }
            g * ((1.0 - t) / (1.0 - p) - t / p) / n
        })
        .collect();
    Ok(Tensor::from_parts(pred.shape().to_vec(), data))
}
