//! Central finite-difference gradient checking in 64-bit precision.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Pass threshold used by the layer battery.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Largest elementwise [`relative_error`] between two gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (leaf index, element index) of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn scalar_value(y: &Tensor<f64>) -> Result<f64> {
    if y.numel() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    Ok(y.item())
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_gradient(f: &mut impl FnMut() -> Result<Tensor<f64>>, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = no_grad(&mut *f).and_then(|y| scalar_value(&y));
        x.data_mut()[i] = orig - eps;
        let minus = no_grad(&mut *f).and_then(|y| scalar_value(&y));
        x.data_mut()[i] = orig;
        out.push((plus? - minus?) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of the scalar `f()` against central
/// differences for every element of every tensor in `leaves`.
///
/// `f` must be deterministic (no dropout). Leaves are marked as requiring
/// gradients and have their gradients cleared first.
pub fn gradcheck_leaves(
    mut f: impl FnMut() -> Result<Tensor<f64>>,
    leaves: &[&Tensor<f64>],
    eps: f64,
) -> Result<GradcheckReport> {
    for leaf in leaves {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    let y = f()?;
    scalar_value(&y)?;
    y.backward()?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = numeric_gradient(&mut f, leaf, eps)?;
        for (ei, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(a, n);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (li, ei);
            }
        }
        report.elements += numeric.len();
        leaf.zero_grad();
    }
    Ok(report)
}

/// Max relative error between the autodiff gradient of `f` at `x` and central
/// finite differences with step `eps`.
pub fn finite_diff_gradcheck(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let report = gradcheck_leaves(|| f(x), &[x], eps)?;
    Ok(report.max_rel_error)
}
