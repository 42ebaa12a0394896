//! Central finite differences against tape gradients.

use super::{GradTape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a - f| / max(1, |a|, |f|)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(GradTape, Vec<Var>, Var)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn scalar_of(tape: &GradTape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.shape() != [1] {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "gradient_check needs a scalar-valued function".into(),
        });
    }
    Ok(v.data()[0])
}

/// Checks every coordinate of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    gradient_check_coords(f, inputs, &coords, step)
}

/// Checks only the listed `(input index, element index)` coordinates.
pub fn gradient_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(&f, inputs)?;
    let base = scalar_of(&tape, out)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base} at the base point")));
    }
    let grads = tape.backward(out)?;

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: coords.first().copied().unwrap_or((0, 0)),
        coords_checked: 0,
    };
    for &(i, j) in coords {
        let analytic = grads.param_grad(i).map_or(0.0, |g| g.data()[j]);
        let orig = probe[i].data()[j];

        probe[i].data_mut()[j] = orig + step;
        let (t, _, o) = evaluate(&f, &probe)?;
        let plus = scalar_of(&t, o)?;
        probe[i].data_mut()[j] = orig - step;
        let (t, _, o) = evaluate(&f, &probe)?;
        let minus = scalar_of(&t, o)?;
        probe[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "input {i} element {j}: analytic {analytic}, numeric {numeric}"
            )));
        }
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, j);
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Reduces a tensor-valued node to a scalar through fixed random weights so
/// that every output element contributes to the checked gradient.
pub fn random_projection(tape: &mut GradTape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let weights = Tensor::random_uniform(&shape, -1.0, 1.0, &mut Rng::new(seed));
    let w = tape.leaf(weights);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}
