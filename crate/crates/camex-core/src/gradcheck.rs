//! Central finite-difference gradient checking.
//!
//! [`fd_check_multi`] is the oracle used throughout the test suites: it
//! re-evaluates the function under test from scratch for every probe, so it is
//! independent of the backward implementation. Relative error uses the
//! denominator `max(1, |ad|, |fd|)`, which behaves like absolute error for
//! near-zero gradients and like relative error for large ones.
//!
//! The function must be deterministic; this is enforced by evaluating it twice
//! and demanding bit-identical results before any probing starts.

use crate::autodiff::{Graph, Var};
use crate::error::{CamexError, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over every entry of every input.
    pub max_rel_err: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// Total number of scalar entries probed.
    pub entries_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Checks the gradient of `build` with respect to a single input tensor.
pub fn fd_check<F>(input: &Tensor, step: f64, tol: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fd_check_multi(std::slice::from_ref(input), step, tol, |g, vars| {
        build(g, vars[0])
    })
}

/// Checks the gradient of a scalar-valued function of several tensors.
///
/// `build` receives a fresh graph and one `Var` per input and must return the
/// scalar loss node. It is invoked many times (twice for the determinism
/// probe, once for the backward pass, twice per scalar entry for probing) and
/// must build the same function each time.
pub fn fd_check_multi<F>(inputs: &[Tensor], step: f64, tol: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(CamexError::Contract {
            detail: format!("fd_check requires a positive finite step, got {step}"),
        });
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).scalar_value()
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(CamexError::Oracle {
            detail: format!(
                "function under test is not deterministic: {first} vs {second} on identical inputs"
            ),
        });
    }
    if !first.is_finite() {
        return Err(CamexError::Oracle {
            detail: format!("function value is not finite: {first}"),
        });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.requires_grad = true;
            g.leaf(c)
        })
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let ad: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("tracked leaf has a gradient buffer"))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = vec![0.0f64; inputs.len()];
    let mut max_rel: f64 = 0.0;
    let mut entries = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = ad[i].data()[e];
            let rel = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
            per_input[i] = per_input[i].max(rel);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        per_input,
        entries_checked: entries,
        tol,
        pass: max_rel <= tol,
    })
}
