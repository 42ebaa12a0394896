//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. Inputs always precede their consumers, so a reverse sweep over
//! the node list is a valid topological order.

use super::ops;
use super::Tensor;
use crate::contrastive;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Conv2d { input: Var, kernel: Var, stride: usize },
    Depthwise { input: Var, filters: Var },
    MaskedAvgPool { input: Var, mask: Tensor },
    L2Normalize(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Bce { pred: Var, target: Tensor },
    InfoNce { anchor: Var, positives: Vec<Var>, negatives: Vec<Var>, tau: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer record of one forward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
    corrupt_matmul_backward: bool,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Accumulated gradient for a registered parameter id.
    pub fn param_grad(&self, id: usize) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, v)| self.grad(*v))
    }

    /// `(parameter id, gradient)` pairs in registration order; parameters that
    /// did not influence the output are omitted.
    pub fn into_param_grads(mut self) -> Vec<(usize, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (id, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.push((*id, g));
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative control for the gradient checker: scales the left-operand
    /// matmul gradient by 1.5 so verification must fail.
    #[doc(hidden)]
    pub fn corrupt_matmul_backward(&mut self) {
        self.corrupt_matmul_backward = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable tensor whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a vector along the trailing (channel) axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let c = *x.shape().last().unwrap();
        if b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, stride }))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, filters: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(input), self.value(filters))?;
        Ok(self.push(out, Op::Depthwise { input, filters }))
    }

    pub fn masked_avg_pool(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        let out = ops::masked_avg_pool(self.value(input), mask)?;
        Ok(self.push(
            out,
            Op::MaskedAvgPool {
                input,
                mask: mask.clone(),
            },
        ))
    }

    /// Spatial mean of an `(h, w, c)` map as a length-`c` vector.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).dims3("spatial_mean")?;
        let ones = Tensor::full(&shape[..2], 1.0);
        self.masked_avg_pool(input, &ones)
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite(format!("cannot normalize vector with norm {norm}")));
        }
        let out = x.map(|v| v / norm);
        Ok(self.push(out, Op::L2Normalize(a)))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let out = ops::bilinear_upsample_x2(self.value(a))?;
        Ok(self.push(out, Op::Upsample2x(a)))
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let out = Tensor::scalar(ops::bce_loss(self.value(pred), target)?);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// InfoNCE over an anchor, positives, and negatives (all length-`c` vectors).
    pub fn infonce(&mut self, anchor: Var, positives: &[Var], negatives: &[Var], tau: f64) -> Result<Var> {
        let pos: Vec<&Tensor> = positives.iter().map(|&v| self.value(v)).collect();
        let neg: Vec<&Tensor> = negatives.iter().map(|&v| self.value(v)).collect();
        let loss = contrastive::infonce_value(self.value(anchor), &pos, &neg, tau)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                anchor,
                positives: positives.to_vec(),
                negatives: negatives.to_vec(),
                tau,
            },
        ))
    }

    /// Backward sweep seeded with d(output)/d(output) = 1 on a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape().to_vec();
        if shape != [1] {
            return Err(Error::InvalidShape {
                shape,
                reason: "backward needs a scalar output".into(),
            });
        }
        self.backward_seeded(&[(output, Tensor::scalar(1.0))])
    }

    /// Backward sweep with explicit upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            self.value(*v).expect_same_shape(g, "backward seed")?;
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (mut da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g)?;
                if self.corrupt_matmul_backward {
                    da = da.map(|v| 1.5 * v);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddBias(a, bias) => {
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
            }
            Op::Relu(a) => {
                let d = g.zip_map(&node.value, "relu", |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => accumulate(grads, *a, ops::softmax_rows_backward(&node.value, g)),
            Op::Conv2d { input, kernel, stride } => {
                let (dx, dk) = ops::conv2d_backward(self.value(*input), self.value(*kernel), *stride, g)?;
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
            }
            Op::Depthwise { input, filters } => {
                let (dx, df) = ops::depthwise_conv2d_backward(self.value(*input), self.value(*filters), g)?;
                accumulate(grads, *input, dx);
                accumulate(grads, *filters, df);
            }
            Op::MaskedAvgPool { input, mask } => {
                accumulate(grads, *input, ops::masked_avg_pool_backward(self.value(*input), mask, g)?);
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let yg: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let d = g.zip_map(y, "l2_normalize", |gv, yv| (gv - yv * yg) / norm)?;
                accumulate(grads, *a, d);
            }
            Op::Upsample2x(a) => {
                accumulate(grads, *a, ops::bilinear_upsample_x2_backward(self.value(*a), g)?);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.value(p).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    let mut d = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + wd]);
                    }
                    offset += wd;
                    accumulate(grads, p, Tensor::from_parts(self.value(p).shape().to_vec(), d));
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Bce { pred, target } => {
                let d = ops::bce_loss_backward(self.value(*pred), target, g.data()[0])?;
                accumulate(grads, *pred, d);
            }
            Op::InfoNce {
                anchor,
                positives,
                negatives,
                tau,
            } => {
                let pos: Vec<&Tensor> = positives.iter().map(|&v| self.value(v)).collect();
                let neg: Vec<&Tensor> = negatives.iter().map(|&v| self.value(v)).collect();
                let (da, dp, dn) = contrastive::infonce_grad(self.value(*anchor), &pos, &neg, *tau)?;
                let s = g.data()[0];
                accumulate(grads, *anchor, da.map(|v| v * s));
                for (&v, d) in positives.iter().zip(dp) {
                    accumulate(grads, v, d.map(|x| x * s));
                }
                for (&v, d) in negatives.iter().zip(dn) {
                    accumulate(grads, v, d.map(|x| x * s));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_gradients_add() {
        // f(w) = sum(w * w) uses w twice: df/dw = 2w.
        let mut tape = GradTape::new();
        let w = tape.param(0, Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let out = tape.sum(sq);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.param_grad(0).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn seeds_on_multiple_outputs_accumulate() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, -1.0);
        let grads = tape
            .backward_seeded(&[
                (a, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()),
                (b, Tensor::new(vec![2], vec![2.0, 0.0]).unwrap()),
            ])
            .unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_parameters_are_omitted() {
        let mut tape = GradTape::new();
        let used = tape.param(0, Tensor::scalar(2.0));
        let _unused = tape.param(1, Tensor::scalar(5.0));
        let out = tape.scale(used, 4.0);
        let grads = tape.backward(out).unwrap().into_param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, 0);
        assert_eq!(grads[0].1.data(), &[4.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 1]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        let seed = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let grads = tape.backward_seeded(&[(c, seed)]).unwrap();
        assert_eq!(grads.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
