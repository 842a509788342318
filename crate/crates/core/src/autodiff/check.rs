//! Central finite-difference oracle for reverse-mode gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest gradient magnitude, for judging the scale of the errors.
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Inputs whose error meets or exceeds the tolerance.
    pub fn failures(&self) -> Vec<&InputCheck> {
        self.inputs
            .iter()
            .filter(|c| c.max_rel_error >= self.tolerance)
            .collect()
    }
}

/// Compares `grad(f(inputs), inputs)` against `(f(x+h) - f(x-h)) / 2h` for
/// every element of every input. `f` must build a scalar from its inputs on
/// a fresh graph; it is re-run for every perturbation.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.grad(out, &vars, false)?;
        grads
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let max_abs = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let max_rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
        checks.push(InputCheck {
            input: k,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            scale,
        });
    }
    Ok(GradCheckReport {
        inputs: checks,
        tolerance,
    })
}
