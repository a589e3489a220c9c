//! Central finite-difference verification of tape gradients.

use super::array::DiffArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative-error denominator floor.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient of a scalar function against
/// `(f(x+h) − f(x−h)) / 2h` for every coordinate of `x`.
pub fn check_gradient<T, F>(f: F, x: &DiffArray<T>, step: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if step <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |data: Vec<T>| -> Result<T> {
        let tape = Tape::new();
        let v = tape.constant(x.shape(), data)?;
        let out = f(&tape, v)?;
        if out.numel() != 1 {
            return Err(Error::contract(format!(
                "function under check must be scalar, got {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    let tape = Tape::new();
    let v = tape.variable(x.shape(), x.data().to_vec())?;
    let out = f(&tape, v)?;
    if out.numel() != 1 {
        return Err(Error::contract(format!(
            "function under check must be scalar, got {:?}",
            out.shape()
        )));
    }
    let analytic = tape.backward(out)?.get_or_zeros(v);

    let two = T::lit(2.0);
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + step;
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - step;
        numeric.push((eval(plus)? - eval(minus)?) / (two * step));
    }

    let analytic: Vec<f64> = analytic.iter().map(|v| v.to_f64_lossy()).collect();
    let numeric: Vec<f64> = numeric.iter().map(|v| v.to_f64_lossy()).collect();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
