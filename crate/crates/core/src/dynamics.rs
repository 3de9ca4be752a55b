//! EKF belief dynamics `b' = g(b, u) + w(b, u) xi`.
//!
//! `g` is the noise-free EKF step: the mean follows the motion model and the
//! covariance goes through prediction and a measurement update assembled at
//! the predicted mean. `w` carries the stochastic part of the mean update,
//! `K (H F e + H v' + n')`, with `e`, `v'` and `n'` whitened so that `xi` is a
//! unit Gaussian. The covariance rows of `w` are zero.

use nalgebra::{DMatrix, DVector};

use crate::belief::{belief_dim, symmetrize, symmetrize_and_clamp, sqrt_psd, unvech, vech_len, vech_unchecked, Belief};
use crate::diff::{numeric_jacobian, JACOBIAN_STEP};
use crate::error::{Error, Result};
use crate::motion::{MotionModel, ProcessModel};
use crate::sensing::StereoCamera;
use crate::solver::{Dynamics, Linearization};

/// Innovation covariances above this condition number are rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// How the noise of a measurement channel is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseWeighting {
    /// Planning: `R / p` with `p` the channel's visibility weight.
    Visibility,
    /// The channel was actually observed: plain `R`.
    Unscaled,
}

/// Stacked measurement prediction for a set of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub ids: Vec<usize>,
    pub predicted: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl Measurement {
    pub fn empty(state_dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            predicted: DVector::zeros(0),
            jacobian: DMatrix::zeros(0, state_dim),
            noise_cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.predicted.len()
    }
}

/// Sensor with discrete measurement channels (features).
pub trait ObservationModel: Send + Sync {
    fn state_dim(&self) -> usize;

    /// Channels that take part in an update at `x`, in ascending id order.
    fn active_set(&self, x: &DVector<f64>) -> Vec<usize>;

    /// Predicted measurement, Jacobian and noise for the given channels at `x`.
    fn predict(&self, x: &DVector<f64>, ids: &[usize], weighting: NoiseWeighting) -> Result<Measurement>;

    /// Every channel id the sensor can produce.
    fn channel_ids(&self) -> Vec<usize>;

    /// Probability that channel `id` is actually detected from true state `x`.
    fn detection_probability(&self, _x: &DVector<f64>, _id: usize) -> f64 {
        1.0
    }
}

/// Output of the EKF prediction step.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prior_cov: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub transition: DMatrix<f64>,
    pub state_noise: DMatrix<f64>,
}

/// Output of the EKF measurement update (covariance side).
#[derive(Debug, Clone)]
pub struct Correction {
    /// `None` when no channel took part.
    pub gain: Option<DMatrix<f64>>,
    pub cov: DMatrix<f64>,
}

/// Deterministic next belief together with the noise matrix of the step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub next: Belief,
    pub noise: DMatrix<f64>,
    pub active: Vec<usize>,
}

/// Belief dynamics built from a process model and a sensor.
#[derive(Debug, Clone)]
pub struct BeliefModel<P = MotionModel, O = StereoCamera> {
    pub process: P,
    pub sensor: O,
}

impl<P: ProcessModel, O: ObservationModel> BeliefModel<P, O> {
    pub fn new(process: P, sensor: O) -> Result<Self> {
        if process.state_dim() != sensor.state_dim() {
            return Err(Error::Dimension {
                context: "sensor state dimension",
                expected: process.state_dim(),
                actual: sensor.state_dim(),
            });
        }
        Ok(Self { process, sensor })
    }

    pub fn state_dim(&self) -> usize {
        self.process.state_dim()
    }

    pub fn belief_dim(&self) -> usize {
        belief_dim(self.state_dim())
    }

    pub fn control_dim(&self) -> usize {
        self.process.control_dim()
    }

    fn check(&self, b: &Belief, u: &DVector<f64>) -> Result<()> {
        let n = self.state_dim();
        if b.mean.len() != n || b.cov_vech.len() != vech_len(n) {
            return Err(Error::Dimension {
                context: "belief",
                expected: self.belief_dim(),
                actual: b.dim(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(Error::Dimension {
                context: "control",
                expected: self.control_dim(),
                actual: u.len(),
            });
        }
        Ok(())
    }

    /// EKF prediction: `x = f(x, u, 0)`, `S = F S F^T + F_v Q F_v^T`.
    pub fn predict(&self, b: &Belief, u: &DVector<f64>) -> Result<Prediction> {
        self.check(b, u)?;
        let sigma = b.covariance();
        let f = self.process.state_jacobian(&b.mean, u)?;
        let q = self.process.state_noise_cov(&b.mean, u)?;
        let mean = self
            .process
            .step(&b.mean, u, &DVector::zeros(self.process.noise_dim()))?;
        let cov = symmetrize(&(&f * &sigma * f.transpose() + &q));
        Ok(Prediction {
            prior_cov: sigma,
            mean,
            cov,
            transition: f,
            state_noise: q,
        })
    }

    /// Covariance update `(I - K H) S` for a measurement linearized at the predicted mean.
    pub fn correct(&self, pred: &Prediction, meas: &Measurement) -> Result<Correction> {
        if meas.is_empty() {
            return Ok(Correction {
                gain: None,
                cov: symmetrize_and_clamp(&pred.cov)?,
            });
        }
        let h = &meas.jacobian;
        let innovation = symmetrize(&(h * &pred.cov * h.transpose() + &meas.noise_cov));
        check_condition(&innovation, &meas.noise_cov, &pred.mean)?;
        let chol = innovation.clone().cholesky().ok_or_else(|| Error::SingularInnovation {
            condition: f64::INFINITY,
            context: format!("predicted mean {:?}", pred.mean.as_slice()),
        })?;
        // K = S H^T (H S H^T + R)^-1, solved from the symmetric side
        let gain = chol.solve(&(h * &pred.cov)).transpose();
        let n = pred.cov.nrows();
        let cov = symmetrize_and_clamp(&((DMatrix::identity(n, n) - &gain * h) * &pred.cov))?;
        Ok(Correction {
            gain: Some(gain),
            cov,
        })
    }

    /// Deterministic belief step `g(b, u)`.
    pub fn propagate(&self, b: &Belief, u: &DVector<f64>) -> Result<Belief> {
        Ok(self.transition(b, u, None)?.next)
    }

    /// Noise matrix `w(b, u)`, `belief_dim x (2n + measurement rows)`.
    pub fn noise_matrix(&self, b: &Belief, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.transition(b, u, None)?.noise)
    }

    /// One belief step. With `frozen` set, the listed channels are used
    /// instead of the active set at the predicted mean.
    pub fn transition(&self, b: &Belief, u: &DVector<f64>, frozen: Option<&[usize]>) -> Result<Transition> {
        let pred = self.predict(b, u)?;
        let active = match frozen {
            Some(ids) => ids.to_vec(),
            None => self.sensor.active_set(&pred.mean),
        };
        let meas = if active.is_empty() {
            Measurement::empty(self.state_dim())
        } else {
            self.sensor.predict(&pred.mean, &active, NoiseWeighting::Visibility)?
        };
        let corr = self.correct(&pred, &meas)?;
        let noise = self.whitened_noise(&pred, &meas, corr.gain.as_ref());
        let next = Belief {
            mean: pred.mean.clone(),
            cov_vech: vech_unchecked(&corr.cov),
        };
        Ok(Transition { next, noise, active })
    }

    fn whitened_noise(&self, pred: &Prediction, meas: &Measurement, gain: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let n = self.state_dim();
        let rows = meas.rows();
        let mut w = DMatrix::zeros(self.belief_dim(), 2 * n + rows);
        let Some(k) = gain else {
            return w;
        };
        let kh = k * &meas.jacobian;
        let est = &kh * &pred.transition * sqrt_psd(&pred.prior_cov);
        let process = &kh * sqrt_psd(&pred.state_noise);
        let sensor = k * sqrt_psd(&meas.noise_cov);
        w.view_mut((0, 0), (n, n)).copy_from(&est);
        w.view_mut((0, n), (n, n)).copy_from(&process);
        w.view_mut((0, 2 * n), (n, rows)).copy_from(&sensor);
        w
    }

    /// Finite-difference Jacobians of `g` and of every column of `w` at
    /// `(b, u)`. The active channel set is frozen at its value at `(b, u)`.
    pub fn belief_jacobians(&self, b: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        let nominal_belief = Belief::from_vector(b)?;
        let nominal = self.transition(&nominal_belief, u, None)?;
        let frozen = nominal.active;
        let dim = self.belief_dim();
        let m = self.control_dim();
        let cols = nominal.noise.ncols();

        let mut z = DVector::zeros(dim + m);
        z.rows_mut(0, dim).copy_from(b);
        z.rows_mut(dim, m).copy_from(u);
        let eval = |zp: &DVector<f64>| -> Result<DVector<f64>> {
            let bp = Belief::from_vector(&zp.rows(0, dim).into_owned())?;
            let up = zp.rows(dim, m).into_owned();
            let t = self.transition(&bp, &up, Some(&frozen))?;
            let mut out = DVector::zeros(dim * (1 + cols));
            out.rows_mut(0, dim).copy_from(&t.next.to_vector());
            out.rows_mut(dim, dim * cols)
                .copy_from_slice(t.noise.as_slice());
            Ok(out)
        };
        let jac = numeric_jacobian(eval, &z, JACOBIAN_STEP)?;

        let g_b = jac.view((0, 0), (dim, dim)).into_owned();
        let g_u = jac.view((0, dim), (dim, m)).into_owned();
        let mut w_b = Vec::with_capacity(cols);
        let mut w_u = Vec::with_capacity(cols);
        for i in 0..cols {
            let r = dim * (1 + i);
            w_b.push(jac.view((r, 0), (dim, dim)).into_owned());
            w_u.push(jac.view((r, dim), (dim, m)).into_owned());
        }
        Ok(Linearization {
            g_b,
            g_u,
            w: nominal.noise,
            w_b,
            w_u,
        })
    }
}

fn check_condition(innovation: &DMatrix<f64>, noise: &DMatrix<f64>, mean: &DVector<f64>) -> Result<()> {
    // S >= R, so trace(S) / min eig(R) bounds cond(S) from above
    let is_diag = noise
        .iter()
        .enumerate()
        .all(|(idx, v)| *v == 0.0 || idx % noise.nrows() == idx / noise.nrows());
    let r_min = if is_diag {
        noise.diagonal().min()
    } else {
        nalgebra::SymmetricEigen::new(noise.clone()).eigenvalues.min()
    };
    if r_min > 0.0 && innovation.trace() / r_min <= MAX_INNOVATION_CONDITION {
        return Ok(());
    }
    let eig = nalgebra::SymmetricEigen::new(innovation.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > MAX_INNOVATION_CONDITION || !condition.is_finite() {
        return Err(Error::SingularInnovation {
            condition,
            context: format!("predicted mean {:?}", mean.as_slice()),
        });
    }
    Ok(())
}

impl<P: ProcessModel, O: ObservationModel> Dynamics for BeliefModel<P, O> {
    fn belief_dim(&self) -> usize {
        BeliefModel::belief_dim(self)
    }

    fn control_dim(&self) -> usize {
        BeliefModel::control_dim(self)
    }

    fn step(&self, b: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.propagate(&Belief::from_vector(b)?, u)?.to_vector())
    }

    fn linearize(&self, b: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        self.belief_jacobians(b, u)
    }
}

/// Linear-Gaussian process `x' = A x + B u + v`, mainly for reference checks.
#[derive(Debug, Clone)]
pub struct LinearProcess {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl ProcessModel for LinearProcess {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.a.nrows()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u + v)
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.q
    }
}

/// Linear sensor `z = H x + n` with a single always-active channel.
#[derive(Debug, Clone)]
pub struct LinearSensor {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ObservationModel for LinearSensor {
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    fn active_set(&self, _x: &DVector<f64>) -> Vec<usize> {
        if self.h.nrows() == 0 {
            Vec::new()
        } else {
            vec![0]
        }
    }

    fn predict(&self, x: &DVector<f64>, ids: &[usize], _weighting: NoiseWeighting) -> Result<Measurement> {
        if ids.is_empty() {
            return Ok(Measurement::empty(self.state_dim()));
        }
        Ok(Measurement {
            ids: ids.to_vec(),
            predicted: &self.h * x,
            jacobian: self.h.clone(),
            noise_cov: self.r.clone(),
        })
    }

    fn channel_ids(&self) -> Vec<usize> {
        self.active_set(&DVector::zeros(0))
    }
}

/// Rebuilds the covariance from a stacked belief vector.
pub fn covariance_of(b: &DVector<f64>) -> Result<DMatrix<f64>> {
    let belief = Belief::from_vector(b)?;
    unvech(belief.cov_vech.as_slice(), belief.state_dim())
}
