//! Central finite-difference gradient checking.
//!
//! Rebuilds the graph from scratch for every probe, so the check stays
//! independent of the reverse pass it validates. Intended for f64 tapes and
//! small shapes.

use super::{Tape, Tensor};
use ndarray::ArrayD;

/// Outcome of a failed probe, formatted for test output.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.6e} vs numeric {:.6e}",
            self.input, self.element, self.analytic, self.numeric
        )
    }
}

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences with step `h` on every element of every input.
///
/// Passes when `|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)`.
pub fn check<F>(inputs: &[ArrayD<f64>], f: F, h: f64, rtol: f64, atol: f64) -> Result<(), GradMismatch>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Tensor<'t, f64>]) -> Tensor<'t, f64>,
{
    let eval = |points: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = points.iter().map(|p| tape.var(p.clone())).collect();
        f(&tape, &vars).scalar_value()
    };

    // analytic gradients
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&tape, &vars);
    assert_eq!(loss.ndim(), 0, "gradcheck requires a scalar output");
    tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim())))
        .collect();

    for (vi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[vi].as_slice_mut().unwrap()[ei] += h;
            minus[vi].as_slice_mut().unwrap()[ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[vi].as_slice().unwrap()[ei];
            if (a - numeric).abs() > atol + rtol * a.abs().max(numeric.abs()) {
                return Err(GradMismatch { input: vi, element: ei, analytic: a, numeric });
            }
        }
    }
    Ok(())
}

/// Convenience wrapper with the tolerances used across this crate:
/// step 1e-5, relative error 1e-4, absolute floor 1e-7.
pub fn check_default<F>(inputs: &[ArrayD<f64>], f: F) -> Result<(), GradMismatch>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Tensor<'t, f64>]) -> Tensor<'t, f64>,
{
    check(inputs, f, 1e-5, 1e-4, 1e-7)
}
