//! Central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative probe size for first derivatives.
pub const JACOBIAN_STEP: f64 = 1e-5;

/// Default relative probe size for second derivatives of scalar functions.
pub const HESSIAN_STEP: f64 = 1e-4;

fn probe_step(step_scale: f64, at: f64) -> f64 {
    step_scale * at.abs().max(1.0)
}

/// Central-difference Jacobian of `f` at `at`.
///
/// Coordinate `i` is probed with `h_i = step_scale * max(1, |at_i|)`.
pub fn numeric_jacobian<F>(mut f: F, at: &DVector<f64>, step_scale: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac: Option<DMatrix<f64>> = None;
    let mut probe = at.clone();
    for i in 0..at.len() {
        let h = probe_step(step_scale, at[i]);
        probe[i] = at[i] + h;
        let plus = f(&probe)?;
        check_finite(&plus, i, "+", at)?;
        probe[i] = at[i] - h;
        let minus = f(&probe)?;
        check_finite(&minus, i, "-", at)?;
        probe[i] = at[i];

        let jac = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), at.len()));
        if plus.len() != jac.nrows() || minus.len() != jac.nrows() {
            return Err(Error::Dimension {
                context: "numeric_jacobian output",
                expected: jac.nrows(),
                actual: plus.len().max(minus.len()),
            });
        }
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    match jac {
        Some(j) => Ok(j),
        None => {
            let rows = f(at)?.len();
            Ok(DMatrix::zeros(rows, 0))
        }
    }
}

fn check_finite(v: &DVector<f64>, i: usize, sign: &str, at: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!(
            "numeric_jacobian probe {sign}h on coordinate {i} at {:?}",
            at.as_slice()
        )))
    }
}

/// Central-difference gradient and Hessian of a scalar function.
pub fn numeric_gradient_hessian<F>(
    mut f: F,
    at: &DVector<f64>,
    step_scale: f64,
) -> (DVector<f64>, DMatrix<f64>)
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let n = at.len();
    let f0 = f(at);
    let h: Vec<f64> = at.iter().map(|a| probe_step(step_scale, *a)).collect();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = at.clone();
    for i in 0..n {
        probe[i] = at[i] + h[i];
        let fp = f(&probe);
        probe[i] = at[i] - h[i];
        let fm = f(&probe);
        probe[i] = at[i];
        grad[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut eval = |si: f64, sj: f64| {
                probe[i] = at[i] + si * h[i];
                probe[j] = at[j] + sj * h[j];
                let v = f(&probe);
                probe[i] = at[i];
                probe[j] = at[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_jacobian() {
        let at = DVector::from_vec(vec![0.3, -12.0, 4e3]);
        let j = numeric_jacobian(|x| Ok(x.clone()), &at, JACOBIAN_STEP).unwrap();
        assert!((j - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let at = DVector::from_vec(vec![0.0, 1.0]);
        let err = numeric_jacobian(
            |x| Ok(DVector::from_vec(vec![if x[1] > 1.0 { f64::NAN } else { 0.0 }])),
            &at,
            JACOBIAN_STEP,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn quadratic_hessian() {
        // f = x0^2 + 3 x0 x1 - 2 x1^2 + x1
        let f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1] + x[1];
        let at = DVector::from_vec(vec![0.5, -1.5]);
        let (g, h) = numeric_gradient_hessian(f, &at, HESSIAN_STEP);
        assert!((g[0] - (1.0 - 4.5)).abs() < 1e-8);
        assert!((g[1] - (1.5 + 6.0 + 1.0)).abs() < 1e-8);
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, -4.0]);
        assert!((h - expected).amax() < 1e-6);
    }
}
