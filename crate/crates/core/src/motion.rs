//! Discrete-time stochastic motion models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{symmetrize, StateVector};
use crate::diff::{numeric_jacobian, JACOBIAN_STEP};
use crate::error::{Error, Result};

/// A process `x' = f(x, u, v)` with additive-Gaussian noise source `v ~ N(0, Q)`.
pub trait ProcessModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    /// Covariance `Q` of the noise source `v`.
    fn noise_cov(&self) -> &DMatrix<f64>;

    /// `df/dx` at `(x, u, 0)`.
    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let v = DVector::zeros(self.noise_dim());
        numeric_jacobian(|xp| self.step(xp, u, &v), x, JACOBIAN_STEP)
    }

    /// `df/dv` at `(x, u, 0)`.
    fn noise_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let v = DVector::zeros(self.noise_dim());
        numeric_jacobian(|vp| self.step(x, u, vp), &v, JACOBIAN_STEP)
    }

    /// State-space process noise `F_v Q F_v^T`.
    fn state_noise_cov(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let fv = self.noise_jacobian(x, u)?;
        Ok(symmetrize(&(&fv * self.noise_cov() * fv.transpose())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    /// `x' = x + dt (u + v)`, inputs `[u_x, u_y, omega]`.
    Holonomic,
    /// `x' = x + dt [cos th, 0; sin th, 0; 0, 1] (u + v)`, inputs `[speed, omega]`.
    Unicycle,
}

impl MotionKind {
    pub fn input_dim(self) -> usize {
        match self {
            MotionKind::Holonomic => 3,
            MotionKind::Unicycle => 2,
        }
    }
}

/// Planar vehicle with noise entering on the control channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    kind: MotionKind,
    dt: f64,
    process_noise_cov: DMatrix<f64>,
}

impl MotionModel {
    pub fn new(kind: MotionKind, dt: f64, process_noise_cov: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("motion.dt", format!("must be positive, got {dt}")));
        }
        let m = kind.input_dim();
        if process_noise_cov.shape() != (m, m) {
            return Err(Error::Dimension {
                context: "process noise covariance",
                expected: m,
                actual: process_noise_cov.nrows(),
            });
        }
        if (&process_noise_cov - process_noise_cov.transpose()).amax() > 1e-12
            || nalgebra::SymmetricEigen::new(process_noise_cov.clone()).eigenvalues.min() < -1e-12
        {
            return Err(Error::config(
                "motion.noise",
                "process noise covariance must be symmetric positive semi-definite",
            ));
        }
        Ok(Self {
            kind,
            dt,
            process_noise_cov,
        })
    }

    /// Model with independent noise of the given standard deviations per input.
    pub fn with_noise_std(kind: MotionKind, dt: f64, noise_std: &[f64]) -> Result<Self> {
        let var = DVector::from_iterator(noise_std.len(), noise_std.iter().map(|s| s * s));
        Self::new(kind, dt, DMatrix::from_diagonal(&var))
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn input_dim(&self) -> usize {
        self.kind.input_dim()
    }

    /// One motion step. Heading is left unwrapped.
    pub fn step_state(&self, x: &StateVector, u: &[f64], v: &[f64]) -> Result<StateVector> {
        let m = self.input_dim();
        for (what, len) in [("control", u.len()), ("noise", v.len())] {
            if len != m {
                return Err(Error::Dimension {
                    context: if what == "control" { "motion control" } else { "motion noise" },
                    expected: m,
                    actual: len,
                });
            }
        }
        let dt = self.dt;
        Ok(match self.kind {
            MotionKind::Holonomic => StateVector::new(
                x.x + dt * (u[0] + v[0]),
                x.y + dt * (u[1] + v[1]),
                x.theta + dt * (u[2] + v[2]),
            ),
            MotionKind::Unicycle => {
                let speed = u[0] + v[0];
                StateVector::new(
                    x.x + dt * x.theta.cos() * speed,
                    x.y + dt * x.theta.sin() * speed,
                    x.theta + dt * (u[1] + v[1]),
                )
            }
        })
    }

    /// Hand-derived `df/dx` at zero noise.
    pub fn analytic_state_jacobian(&self, x: &StateVector, u: &[f64]) -> DMatrix<f64> {
        let mut f = DMatrix::identity(3, 3);
        if self.kind == MotionKind::Unicycle {
            f[(0, 2)] = -self.dt * u[0] * x.theta.sin();
            f[(1, 2)] = self.dt * u[0] * x.theta.cos();
        }
        f
    }

    /// Hand-derived `df/du` (equal to `df/dv`).
    pub fn analytic_control_jacobian(&self, x: &StateVector) -> DMatrix<f64> {
        match self.kind {
            MotionKind::Holonomic => DMatrix::identity(3, 3) * self.dt,
            MotionKind::Unicycle => DMatrix::from_row_slice(
                3,
                2,
                &[
                    self.dt * x.theta.cos(),
                    0.0,
                    self.dt * x.theta.sin(),
                    0.0,
                    0.0,
                    self.dt,
                ],
            ),
        }
    }
}

impl ProcessModel for MotionModel {
    fn state_dim(&self) -> usize {
        StateVector::DIM
    }

    fn control_dim(&self) -> usize {
        self.input_dim()
    }

    fn noise_dim(&self) -> usize {
        self.input_dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let s = StateVector::from_slice(x.as_slice())?;
        Ok(self.step_state(&s, u.as_slice(), v.as_slice())?.to_vector())
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.process_noise_cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn holonomic(dt: f64) -> MotionModel {
        MotionModel::with_noise_std(MotionKind::Holonomic, dt, &[0.1, 0.1, 0.05]).unwrap()
    }

    fn unicycle(dt: f64) -> MotionModel {
        MotionModel::with_noise_std(MotionKind::Unicycle, dt, &[0.1, 0.05]).unwrap()
    }

    #[test]
    fn holonomic_step() {
        let x = holonomic(0.5)
            .step_state(&StateVector::new(0., 0., 0.), &[1., 0., 0.1], &[0., 0., 0.])
            .unwrap();
        assert_eq!(x, StateVector::new(0.5, 0.0, 0.05));
    }

    #[test]
    fn unicycle_steps() {
        let m = unicycle(0.5);
        let x = m
            .step_state(&StateVector::new(0., 0., FRAC_PI_2), &[1., 0.], &[0., 0.])
            .unwrap();
        assert!(x.x.abs() < 1e-12 && (x.y - 0.5).abs() < 1e-12 && (x.theta - FRAC_PI_2).abs() < 1e-12);

        // x + 0.1 * [cos 0 * 2.1, sin 0 * 2.1, 1] = [1.21, 1, 0.1]
        let x = unicycle(0.1)
            .step_state(&StateVector::new(1., 1., 0.), &[2., 1.], &[0.1, 0.])
            .unwrap();
        assert!((x.x - 1.21).abs() < 1e-12);
        assert!((x.y - 1.0).abs() < 1e-12);
        assert!((x.theta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = unicycle(0.1);
        assert!(matches!(
            m.step_state(&StateVector::new(0., 0., 0.), &[1., 0., 0.], &[0., 0.]),
            Err(Error::Dimension { .. })
        ));
        assert!(MotionModel::with_noise_std(MotionKind::Unicycle, 0.1, &[0.1]).is_err());
        assert!(MotionModel::with_noise_std(MotionKind::Unicycle, 0.0, &[0.1, 0.1]).is_err());
    }

    #[test]
    fn holonomic_jacobians_are_exact() {
        let m = holonomic(0.3);
        let x = DVector::from_vec(vec![12.0, -3.0, 7.5]);
        let u = DVector::from_vec(vec![1.0, 2.0, -0.4]);
        assert!((m.state_jacobian(&x, &u).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-10);
        let v = DVector::zeros(3);
        let fu = numeric_jacobian(|up| m.step(&x, up, &v), &u, JACOBIAN_STEP).unwrap();
        assert!((fu - DMatrix::identity(3, 3) * 0.3).amax() < 1e-10);
    }

    #[test]
    fn unicycle_jacobian_at_origin() {
        let m = unicycle(0.5);
        let f = m
            .state_jacobian(&DVector::zeros(3), &DVector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1., 0., 0., 0., 1., 0.5, 0., 0., 1.]);
        assert!((f - expected).amax() < 1e-10);
    }

    #[test]
    fn unicycle_jacobian_matches_analytic_at_random_states() {
        let m = unicycle(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s = StateVector::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-6.0..6.0),
            );
            let u = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)]);
            let num = m.state_jacobian(&s.to_vector(), &u).unwrap();
            assert!((num - m.analytic_state_jacobian(&s, u.as_slice())).amax() < 1e-6);
            let num_v = m.noise_jacobian(&s.to_vector(), &u).unwrap();
            assert!((num_v - m.analytic_control_jacobian(&s)).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_step_is_repeatable() {
        let m = unicycle(0.1);
        let x = StateVector::new(0.3, -0.2, 1.1);
        let a = m.step_state(&x, &[0.7, 0.2], &[0., 0.]).unwrap();
        let b = m.step_state(&x, &[0.7, 0.2], &[0., 0.]).unwrap();
        assert_eq!(a.x.to_bits(), b.x.to_bits());
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a.theta.to_bits(), b.theta.to_bits());
    }
}
