//! Lightweight non-local self-attention, cross-level co-attention, and gated
//! aggregation.
//!
//! Each mechanism comes in two forms: a `*_on` builder that records onto a
//! [`GradTape`] (used by the model and the gradient checker) and a value-level
//! wrapper that evaluates on a scratch tape.

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor, Var};

/// Projects the spatially pooled feature to one 3×3 depthwise kernel per
/// channel. `weight` is `(c, 9c)`; there is no bias, so a zero feature yields a
/// zero filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFilterGenerator {
    pub weight: Tensor,
}

impl DynamicFilterGenerator {
    pub fn zeros(c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c, 9 * c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Filter bank `(3, 3, c)` for one feature map.
    pub fn filters(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(self.weight.clone());
        let f = dynamic_filters_on(&mut tape, xv, w)?;
        Ok(tape.value(f).clone())
    }
}

/// Bilinear affinity weight `(c, c)` plus the strided 3×3 convolution that
/// resizes the low-level feature to the high-level grid and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionParams {
    pub weight: Tensor,
    pub resize: Tensor,
}

/// 1×1 convolution `(1, 1, c, c)` and per-channel bias of a sigmoid gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn flatten(tape: &mut GradTape, x: Var) -> Result<(Var, [usize; 3])> {
    let dims = tape.value(x).dims3("attention")?;
    let flat = tape.reshape(x, &[dims[0] * dims[1], dims[2]])?;
    Ok((flat, dims))
}

/// `y = x (xᵀ x) / N` on the flattened `(N, c)` feature.
pub fn lightweight_nonlocal_on(tape: &mut GradTape, x: Var) -> Result<Var> {
    let (flat, [h, w, c]) = flatten(tape, x)?;
    let n = (h * w) as f64;
    let xt = tape.transpose(flat)?;
    let gram = tape.matmul(xt, flat)?;
    let y = tape.matmul(flat, gram)?;
    let y = tape.scale(y, 1.0 / n);
    tape.reshape(y, &[h, w, c])
}

/// Same result as [`lightweight_nonlocal_on`] evaluated as `(x xᵀ) x / N`.
pub fn lightweight_nonlocal_unordered_on(tape: &mut GradTape, x: Var) -> Result<Var> {
    let (flat, [h, w, c]) = flatten(tape, x)?;
    let n = (h * w) as f64;
    let xt = tape.transpose(flat)?;
    let affinity = tape.matmul(flat, xt)?;
    let y = tape.matmul(affinity, flat)?;
    let y = tape.scale(y, 1.0 / n);
    tape.reshape(y, &[h, w, c])
}

pub fn lightweight_nonlocal(x: &Tensor) -> Result<Tensor> {
    eval_unary(x, lightweight_nonlocal_on)
}

pub fn lightweight_nonlocal_unordered(x: &Tensor) -> Result<Tensor> {
    eval_unary(x, lightweight_nonlocal_unordered_on)
}

fn eval_unary(x: &Tensor, f: impl FnOnce(&mut GradTape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Pairwise evaluation `y_i = (1/N) Σ_j (x_i · x_j) x_j`. Quadratic in the
/// number of positions; intended as a reference for small inputs.
pub fn naive_nonlocal_reference(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("naive_nonlocal_reference")?;
    let n = h * w;
    let d = x.data();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let xi = &d[i * c..(i + 1) * c];
        for j in 0..n {
            let xj = &d[j * c..(j + 1) * c];
            let aff: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            for k in 0..c {
                out[i * c + k] += aff * xj[k];
            }
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    Tensor::new(vec![h, w, c], out)
}

/// Pools `x` spatially and projects it through `weight (c, 9c)` to a
/// `(3, 3, c)` filter bank.
pub fn dynamic_filters_on(tape: &mut GradTape, x: Var, weight: Var) -> Result<Var> {
    let [_, _, c] = tape.value(x).dims3("dynamic_filters")?;
    if tape.value(weight).shape() != [c, 9 * c] {
        return Err(Error::ShapeMismatch {
            op: "dynamic_filters",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(weight).shape().to_vec(),
        });
    }
    let pooled = tape.spatial_mean(x)?;
    let row = tape.reshape(pooled, &[1, c])?;
    let taps = tape.matmul(row, weight)?;
    tape.reshape(taps, &[3, 3, c])
}

/// `z_self = depthwise(nonlocal(x), filters(x)) + x`, differentiable through
/// the filter generator as well as the attention path.
pub fn self_attention_on(tape: &mut GradTape, x: Var, gen_weight: Var) -> Result<Var> {
    let filters = dynamic_filters_on(tape, x, gen_weight)?;
    let y = lightweight_nonlocal_on(tape, x)?;
    let conv = tape.depthwise_conv2d(y, filters)?;
    tape.add(conv, x)
}

pub fn self_attention_block(x: &Tensor, gen: &DynamicFilterGenerator) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(gen.weight.clone());
    let z = self_attention_on(&mut tape, xv, w)?;
    Ok(tape.value(z).clone())
}

/// Stride that maps the low-level grid onto the high-level one.
fn resize_stride(v: &Tensor, x: &Tensor) -> Result<usize> {
    let [vh, vw, _] = v.dims3("coattention")?;
    let [xh, xw, _] = x.dims3("coattention")?;
    if vh % xh != 0 || vw % xw != 0 || vh / xh != vw / xw {
        return Err(Error::ShapeMismatch {
            op: "coattention resize",
            lhs: v.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok(vh / xh)
}

/// `z_co = softmax_rows(v' W xᵀ) x` with `v' = conv(v, resize, stride)`.
pub fn coattention_on(tape: &mut GradTape, v: Var, x: Var, weight: Var, resize: Var) -> Result<Var> {
    let stride = resize_stride(tape.value(v), tape.value(x))?;
    let resized = tape.conv2d(v, resize, stride)?;
    if tape.value(resized).shape() != tape.value(x).shape() {
        return Err(Error::ShapeMismatch {
            op: "coattention resize",
            lhs: tape.value(resized).shape().to_vec(),
            rhs: tape.value(x).shape().to_vec(),
        });
    }
    let (vflat, _) = flatten(tape, resized)?;
    let (xflat, [h, w, c]) = flatten(tape, x)?;
    let vw = tape.matmul(vflat, weight)?;
    let xt = tape.transpose(xflat)?;
    let affinity = tape.matmul(vw, xt)?;
    let attn = tape.softmax_rows(affinity)?;
    let z = tape.matmul(attn, xflat)?;
    tape.reshape(z, &[h, w, c])
}

pub fn coattention(v: &Tensor, x: &Tensor, p: &CoAttentionParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let vv = tape.leaf(v.clone());
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(p.weight.clone());
    let r = tape.leaf(p.resize.clone());
    let z = coattention_on(&mut tape, vv, xv, w, r)?;
    Ok(tape.value(z).clone())
}

/// `sigmoid(conv1x1(z) + b) ⊙ z`.
pub fn gate_on(tape: &mut GradTape, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let pre = tape.conv2d(z, weight, 1)?;
    let pre = tape.add_bias(pre, bias)?;
    let f = tape.sigmoid(pre);
    tape.mul(f, z)
}

pub fn gate(z: &Tensor, g: &GateParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let zv = tape.leaf(z.clone());
    let w = tape.leaf(g.weight.clone());
    let b = tape.leaf(g.bias.clone());
    let out = gate_on(&mut tape, zv, w, b)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonlocalVariant {
    /// Explicit pairwise sum over positions.
    Naive,
    /// `x (xᵀ x)`.
    LightweightReordered,
    /// `(x xᵀ) x`.
    LightweightUnordered,
}

impl NonlocalVariant {
    pub const ALL: [NonlocalVariant; 3] = [
        NonlocalVariant::Naive,
        NonlocalVariant::LightweightReordered,
        NonlocalVariant::LightweightUnordered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NonlocalVariant::Naive => "naive",
            NonlocalVariant::LightweightReordered => "lightweight_reordered",
            NonlocalVariant::LightweightUnordered => "lightweight_unordered",
        }
    }

    pub fn evaluate(self, x: &Tensor) -> Result<Tensor> {
        match self {
            NonlocalVariant::Naive => naive_nonlocal_reference(x),
            NonlocalVariant::LightweightReordered => lightweight_nonlocal(x),
            NonlocalVariant::LightweightUnordered => lightweight_nonlocal_unordered(x),
        }
    }
}

/// Multiplies needed by each evaluation order (normalization excluded).
pub fn count_flops(variant: NonlocalVariant, h: u64, w: u64, c: u64) -> u64 {
    let n = h * w;
    match variant {
        NonlocalVariant::Naive | NonlocalVariant::LightweightUnordered => 2 * n * n * c,
        NonlocalVariant::LightweightReordered => 2 * n * c * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{random_projection, DEFAULT_STEP};
    use crate::tensor::{gradient_check, ops};

    #[test]
    fn nonlocal_zero_and_single_spike() {
        let z = Tensor::zeros(&[3, 2, 4]);
        assert_eq!(lightweight_nonlocal(&z).unwrap(), z);
        assert_eq!(naive_nonlocal_reference(&z).unwrap(), z);

        let x = Tensor::new(vec![2, 2, 1], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let y = lightweight_nonlocal(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn naive_single_position() {
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = naive_nonlocal_reference(&x).unwrap();
        let norm2 = 1.0 + 4.0 + 0.25;
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - norm2 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn variants_agree() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let h = 1 + rng.below(8) as usize;
            let w = 1 + rng.below(8) as usize;
            let c = 1 + rng.below(8) as usize;
            let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut rng);
            let naive = naive_nonlocal_reference(&x).unwrap();
            let re = lightweight_nonlocal(&x).unwrap();
            let un = lightweight_nonlocal_unordered(&x).unwrap();
            assert!(re.max_abs_diff(&naive) <= 1e-10);
            assert!(un.max_abs_diff(&naive) <= 1e-10);
            assert!(re.max_abs_diff(&un) <= 1e-10);
        }
    }

    #[test]
    fn self_attention_zero_input_and_residual() {
        let mut rng = Rng::new(5);
        let gen = DynamicFilterGenerator {
            weight: Tensor::random_uniform(&[4, 36], -1.0, 1.0, &mut rng),
        };
        let z = Tensor::zeros(&[4, 4, 4]);
        assert_eq!(self_attention_block(&z, &gen).unwrap(), z);
        assert_eq!(gen.filters(&z).unwrap(), Tensor::zeros(&[3, 3, 4]));

        let x = Tensor::random_uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let out = self_attention_block(&x, &DynamicFilterGenerator::zeros(4)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn self_attention_gradient() {
        let mut rng = Rng::new(17);
        let x = Tensor::random_uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(&[4, 36], -0.5, 0.5, &mut rng);
        let report = gradient_check(
            |tape, v| {
                let z = self_attention_on(tape, v[0], v[1])?;
                random_projection(tape, z, 99)
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    fn co_params(c_v: usize, c: usize, rng: &mut Rng) -> CoAttentionParams {
        CoAttentionParams {
            weight: Tensor::random_uniform(&[c, c], -1.0, 1.0, rng),
            resize: Tensor::random_uniform(&[3, 3, c_v, c], -0.5, 0.5, rng),
        }
    }

    #[test]
    fn coattention_zero_weight_gives_spatial_mean() {
        let mut rng = Rng::new(3);
        let v = Tensor::random_uniform(&[8, 8, 2], -1.0, 1.0, &mut rng);
        let x = Tensor::random_uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let mut p = co_params(2, 3, &mut rng);
        p.weight = Tensor::zeros(&[3, 3]);
        let z = coattention(&v, &x, &p).unwrap();
        let mean = ops::masked_avg_pool(&x, &Tensor::full(&[4, 4], 1.0)).unwrap();
        for pos in 0..16 {
            for c in 0..3 {
                assert!((z.data()[pos * 3 + c] - mean.data()[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn coattention_single_position_is_identity() {
        let mut rng = Rng::new(4);
        let v = Tensor::random_uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let x = Tensor::random_uniform(&[1, 1, 3], -1.0, 1.0, &mut rng);
        let p = co_params(2, 3, &mut rng);
        assert!(coattention(&v, &x, &p).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn coattention_matches_triple_loop() {
        let mut rng = Rng::new(6);
        let c = 2;
        // Stride 1 resize with a channel-identity center tap makes v' = v.
        let v = Tensor::random_uniform(&[3, 3, c], -1.0, 1.0, &mut rng);
        let x = Tensor::random_uniform(&[3, 3, c], -1.0, 1.0, &mut rng);
        let mut resize = Tensor::zeros(&[3, 3, c, c]);
        for k in 0..c {
            resize.data_mut()[(4 * c + k) * c + k] = 1.0;
        }
        let weight = Tensor::random_uniform(&[c, c], -1.0, 1.0, &mut rng);
        let z = coattention(&v, &x, &CoAttentionParams { weight: weight.clone(), resize }).unwrap();

        let n = 9;
        let (vd, xd, wd) = (v.data(), x.data(), weight.data());
        for i in 0..n {
            let mut a = vec![0.0; n];
            for (j, aij) in a.iter_mut().enumerate() {
                for p in 0..c {
                    for q in 0..c {
                        *aij += vd[i * c + p] * wd[p * c + q] * xd[j * c + q];
                    }
                }
            }
            let denom: f64 = a.iter().map(|v| v.exp()).sum();
            for k in 0..c {
                let expect: f64 = (0..n).map(|j| a[j].exp() / denom * xd[j * c + k]).sum();
                assert!((z.data()[i * c + k] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn coattention_rejects_incompatible_grids() {
        let mut rng = Rng::new(1);
        let v = Tensor::random_uniform(&[6, 6, 2], -1.0, 1.0, &mut rng);
        let x = Tensor::random_uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let p = co_params(2, 3, &mut rng);
        assert!(coattention(&v, &x, &p).is_err());
    }

    #[test]
    fn gate_cases() {
        let mut rng = Rng::new(8);
        let z = Tensor::random_uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let zero = GateParams {
            weight: Tensor::zeros(&[1, 1, 3, 3]),
            bias: Tensor::zeros(&[3]),
        };
        let out = gate(&z, &zero).unwrap();
        assert!(out.max_abs_diff(&z.map(|v| 0.5 * v)) < 1e-16);

        let saturated = GateParams {
            weight: Tensor::zeros(&[1, 1, 3, 3]),
            bias: Tensor::full(&[3], 40.0),
        };
        assert!(gate(&z, &saturated).unwrap().max_abs_diff(&z) <= 1e-12);

        let g = GateParams {
            weight: Tensor::random_uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng),
            bias: Tensor::random_uniform(&[3], -1.0, 1.0, &mut rng),
        };
        let out = gate(&z, &g).unwrap();
        for p in 0..16 {
            for k in 0..3 {
                let mut pre = g.bias.data()[k];
                for j in 0..3 {
                    pre += z.data()[p * 3 + j] * g.weight.data()[j * 3 + k];
                }
                let expect = z.data()[p * 3 + k] / (1.0 + (-pre).exp());
                assert!((out.data()[p * 3 + k] - expect).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn flop_counts() {
        use NonlocalVariant::*;
        assert_eq!(count_flops(Naive, 16, 16, 32), 4_194_304);
        assert_eq!(count_flops(LightweightReordered, 16, 16, 32), 524_288);
        assert_eq!(count_flops(Naive, 16, 16, 32) / count_flops(LightweightReordered, 16, 16, 32), 8);
        assert_eq!(count_flops(Naive, 4, 4, 16), count_flops(LightweightReordered, 4, 4, 16));
        assert_eq!(count_flops(Naive, 1, 1, 1), 2);
        assert_eq!(count_flops(LightweightReordered, 1, 1, 1), 2);
    }
}
