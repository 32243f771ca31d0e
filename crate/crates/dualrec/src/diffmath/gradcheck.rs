//! Finite-difference gradient oracle.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// Returns the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
/// Run in f64; `step` around 1e-6 is the usual choice.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let out = f(inputs);
    if out.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check: f must be scalar-valued, got shape {:?}",
            out.shape()
        )));
    }
    for t in inputs {
        t.zero_grad();
    }
    out.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.with_data_mut(|d| d[i] = orig + step);
            let fp = f(inputs).item();
            t.with_data_mut(|d| d[i] = orig - step);
            let fm = f(inputs).item();
            t.with_data_mut(|d| d[i] = orig);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
