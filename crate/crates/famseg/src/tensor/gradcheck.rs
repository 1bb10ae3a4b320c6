//! Central finite-difference verification of tape gradients.
//!
//! Non-scalar functions are reduced to a scalar through a fixed weighted sum
//! so one backward pass covers every output element. Relative error uses
//! `|a - n| / max(|a|, |n|, 1e-3)`: below the 1e-3 floor the comparison is
//! effectively absolute, which keeps finite-difference truncation noise on
//! near-zero gradients from dominating the report.

use super::{numel, Tape, TensorId};
use crate::error::{FamError, Result};

pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Fixed scalarization weight for output element i.
fn probe_weight(i: usize) -> f64 {
    // deterministic, irregular, bounded away from zero
    0.5 + ((i as u64).wrapping_mul(2_654_435_761) % 1024) as f64 / 2048.0
}

fn scalarize(tape: &mut Tape, out: TensorId) -> Result<TensorId> {
    let n = tape.data(out).len();
    let weights: Vec<f64> = (0..n).map(probe_weight).collect();
    let w = tape.constant(weights, tape.shape(out).to_vec())?;
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Check one function of one tensor. `f` must be deterministic; this is
/// verified by comparing two forward passes bitwise.
pub fn gradcheck<F>(f: F, x_data: &[f64], x_shape: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let eval = |data: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(data.to_vec(), x_shape.to_vec(), false)?;
        let out = f(&mut tape, x)?;
        Ok(tape.data(out).to_vec())
    };
    let base1 = eval(x_data)?;
    let base2 = eval(x_data)?;
    if base1 != base2 {
        return Err(FamError::NonDeterministic);
    }

    // analytic gradient of the scalarized output
    let mut tape = Tape::new();
    let x = tape.leaf(x_data.to_vec(), x_shape.to_vec(), true)?;
    let out = f(&mut tape, x)?;
    let loss = scalarize(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("requires_grad leaf has grad").to_vec();

    let scalar_of = |data: &[f64]| -> Result<f64> {
        let out = eval(data)?;
        Ok(out.iter().enumerate().map(|(i, v)| v * probe_weight(i)).sum())
    };

    let mut max_rel = 0.0f64;
    let mut probe = x_data.to_vec();
    for i in 0..numel(x_shape) {
        let orig = probe[i];
        probe[i] = orig + h;
        let lp = scalar_of(&probe)?;
        probe[i] = orig - h;
        let lm = scalar_of(&probe)?;
        probe[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked: numel(x_shape), tol })
}

/// Check a function of several tensors (params and/or inputs) at once.
/// Every input is treated as a differentiation target. When an input has
/// more than `max_checks_per_input` elements, a deterministic stride sample
/// is verified against the single analytic backward pass.
pub fn gradcheck_inputs<F>(
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    tol: f64,
    max_checks_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |datas: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(datas)
            .map(|((_, shape), data)| tape.leaf(data.clone(), shape.clone(), false))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &ids)?;
        Ok(tape.data(out).to_vec())
    };
    let datas: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let base1 = eval(&datas)?;
    let base2 = eval(&datas)?;
    if base1 != base2 {
        return Err(FamError::NonDeterministic);
    }

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &ids)?;
    let loss = scalarize(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("grad populated").to_vec())
        .collect();

    let scalar_of = |datas: &[Vec<f64>]| -> Result<f64> {
        let out = eval(datas)?;
        Ok(out.iter().enumerate().map(|(i, v)| v * probe_weight(i)).sum())
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut probe = datas.clone();
    for (ti, (data, _)) in inputs.iter().enumerate() {
        let n = data.len();
        let step = if n > max_checks_per_input { n.div_ceil(max_checks_per_input) } else { 1 };
        for i in (0..n).step_by(step) {
            let orig = probe[ti][i];
            probe[ti][i] = orig + h;
            let lp = scalar_of(&probe)?;
            probe[ti][i] = orig - h;
            let lm = scalar_of(&probe)?;
            probe[ti][i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[ti][i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked, tol })
}
