//! Central finite-difference oracle for analytic gradients.

use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged by absolute error instead of amplified rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// A named parameter being checked.
#[derive(Debug, Clone)]
pub struct CheckParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl CheckParam {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Self {
        CheckParam {
            name: name.into(),
            shape: shape.to_vec(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    /// Entries over tolerance, in scan order.
    pub failures: Vec<EntryMismatch>,
    pub tol: f64,
    pub entries_checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn leaves(params: &[CheckParam], values: &[Arc<Vec<f64>>], requires_grad: bool) -> Result<Vec<Tensor>> {
    params
        .iter()
        .zip(values)
        .map(|(p, v)| Tensor::shared(&p.shape, v.clone(), requires_grad))
        .collect()
}

fn eval_scalar<F>(f: &F, params: &[CheckParam], values: &[Arc<Vec<f64>>]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let out = f(&leaves(params, values, false)?)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck: function must return a scalar, got {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Analytic gradient of `f` at `params` via [`Tensor::backward`].
pub fn analytic_gradient<F>(f: &F, params: &[CheckParam]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let values: Vec<_> = params.iter().map(|p| Arc::new(p.value.clone())).collect();
    let inputs = leaves(params, &values, true)?;
    f(&inputs)?.backward()?;
    Ok(inputs
        .iter()
        .map(|t| t.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// `(f(θ + h·e_i) - f(θ - h·e_i)) / 2h` for every entry of every parameter.
///
/// Fails with a contract error when two baseline evaluations disagree.
pub fn numeric_gradient<F>(f: &F, params: &[CheckParam], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("gradcheck: step must be positive, got {step}")));
    }
    let mut values: Vec<_> = params.iter().map(|p| Arc::new(p.value.clone())).collect();
    let first = eval_scalar(f, params, &values)?;
    let second = eval_scalar(f, params, &values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "gradcheck: function is not deterministic ({first} vs {second})"
        )));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let mut g = Vec::with_capacity(p.value.len());
        for j in 0..p.value.len() {
            let orig = p.value[j];
            Arc::make_mut(&mut values[i])[j] = orig + step;
            let plus = eval_scalar(f, params, &values)?;
            Arc::make_mut(&mut values[i])[j] = orig - step;
            let minus = eval_scalar(f, params, &values)?;
            Arc::make_mut(&mut values[i])[j] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares two gradient sets entry by entry.
pub fn compare_gradients(params: &[CheckParam], analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradReport {
    let mut report = GradReport {
        max_rel_error: 0.0,
        per_param: Vec::with_capacity(params.len()),
        failures: Vec::new(),
        tol,
        entries_checked: 0,
    };
    for ((p, a), n) in params.iter().zip(analytic).zip(numeric) {
        let mut worst = 0.0f64;
        for (index, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = rel_error(av, nv);
            // NaN compares false, so route it to the failure branch explicitly.
            if !(e < tol) {
                report.failures.push(EntryMismatch {
                    param: p.name.clone(),
                    index,
                    analytic: av,
                    numeric: nv,
                    rel_error: e,
                });
            }
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            report.entries_checked += 1;
        }
        report.max_rel_error = if worst.is_nan() { f64::NAN } else { report.max_rel_error.max(worst) };
        report.per_param.push((p.name.clone(), worst));
    }
    report
}

/// Checks every analytic gradient entry of `f` against central differences.
pub fn finite_diff_gradcheck<F>(f: F, params: &[CheckParam], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let numeric = numeric_gradient(&f, params, step)?;
    let analytic = analytic_gradient(&f, params)?;
    Ok(compare_gradients(params, &analytic, &numeric, tol))
}
