use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    /// max over checked coordinates of `|analytic − central| / (|central| + 1e-12)`
    pub max_rel_error: f64,
    /// coordinate where the maximum occurred
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub central: Vec<f64>,
}

/// Checks the tape gradient of a scalar function at `point`.
///
/// `f` receives a fresh tape and the input variable and must return a
/// `1×1` value. `coords` restricts the comparison to a subset of input
/// coordinates (all of them when `None`).
pub fn finite_diff_check<F>(
    f: F,
    point: &Tensor<f64>,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<FiniteDiffReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {h} must be positive")));
    }
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        let y = f(&tape, v)?.item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { op: "finite_diff_check" })
        }
    };

    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let grad = tape
        .gradients(y, &[x])?
        .pop()
        .flatten()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(coords.len()),
        central: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        if i >= point.numel() {
            return Err(Error::invalid(format!("coordinate {i} outside input")));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = (analytic - central).abs() / (central.abs() + 1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.central.push(central);
    }
    Ok(report)
}
