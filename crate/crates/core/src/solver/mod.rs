//! Augmented-Lagrangian iLQG over belief space.
//!
//! The inner loop is an iLQG solve of the augmented cost: a backward pass
//! that includes the stochastic terms of the belief dynamics, and a
//! backtracking forward pass. The outer loop updates multipliers, penalty
//! parameters and violation thresholds per timestep and constraint.

mod al;
mod ilqg;

pub use al::{outer_solve, Augmented, OuterRecord, SolveReport};
pub use ilqg::{
    backward_pass, expand, forward_pass, inner_solve, rollout, trajectory_cost, BackwardPass, Expansion, InnerResult,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order expansion of `b' = g(b, u) + sum_i w_i(b, u) xi_i`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub g_b: DMatrix<f64>,
    pub g_u: DMatrix<f64>,
    /// Noise columns `w_i` at the nominal point.
    pub w: DMatrix<f64>,
    /// `d w_i / d b`, one matrix per column.
    pub w_b: Vec<DMatrix<f64>>,
    /// `d w_i / d u`, one matrix per column.
    pub w_u: Vec<DMatrix<f64>>,
}

/// Discrete stochastic dynamics over a flat state (the belief vector).
pub trait Dynamics: Sync {
    fn belief_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Noise-free step.
    fn step(&self, b: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn linearize(&self, b: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization>;
}

/// Value, gradient and Hessian of a cost term. Terminal expansions have `m = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub value: f64,
    pub b: DVector<f64>,
    pub u: DVector<f64>,
    pub bb: DMatrix<f64>,
    pub uu: DMatrix<f64>,
    /// `d^2 c / du db`, `m x n`.
    pub ub: DMatrix<f64>,
}

impl CostExpansion {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            value: 0.0,
            b: DVector::zeros(n),
            u: DVector::zeros(m),
            bb: DMatrix::zeros(n, n),
            uu: DMatrix::zeros(m, m),
            ub: DMatrix::zeros(m, n),
        }
    }
}

/// Stage and terminal costs plus inequality constraints `psi_k(b) <= 0`
/// that are linear in the belief.
pub trait Objective: Sync {
    fn stage_cost(&self, k: usize, b: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, b: &DVector<f64>) -> f64;
    fn stage_expansion(&self, k: usize, b: &DVector<f64>, u: &DVector<f64>) -> CostExpansion;
    fn terminal_expansion(&self, b: &DVector<f64>) -> CostExpansion;

    fn constraint_count(&self) -> usize {
        0
    }

    fn constraint(&self, _k: usize, _b: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn constraint_jacobian(&self, _k: usize, b: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, b.len())
    }

    /// Natural magnitude of each constraint; schedule constants and the
    /// feasibility tolerance are applied relative to it.
    fn constraint_scale(&self) -> DVector<f64> {
        DVector::from_element(self.constraint_count(), 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub beliefs: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Time-varying affine policy `u_k = u_bar_k + L_k (b - b_bar_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub nominal_beliefs: Vec<DVector<f64>>,
    pub nominal_controls: Vec<DVector<f64>>,
    /// Open-loop correction `-Q_uu^-1 Q_u` at the final nominal.
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.nominal_controls.len()
    }

    pub fn control(&self, k: usize, b: &DVector<f64>) -> DVector<f64> {
        &self.nominal_controls[k] + &self.feedback[k] * (b - &self.nominal_beliefs[k])
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            beliefs: self.nominal_beliefs.clone(),
            controls: self.nominal_controls.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.horizon();
        let lens = [
            ("policy.nominal_beliefs", self.nominal_beliefs.len(), k + 1),
            ("policy.feedforward", self.feedforward.len(), k),
            ("policy.feedback", self.feedback.len(), k),
        ];
        for (path, len, expected) in lens {
            if len != expected {
                return Err(Error::config(path, format!("expected {expected} entries, got {len}")));
            }
        }
        Ok(())
    }
}

/// Optimization problem: dynamics, objective, start belief and initial controls.
#[derive(Debug, Clone)]
pub struct SolverProblem<D, O> {
    pub dynamics: D,
    pub objective: O,
    pub initial_belief: DVector<f64>,
    pub initial_controls: Vec<DVector<f64>>,
}

impl<D: Dynamics, O: Objective> SolverProblem<D, O> {
    pub fn new(dynamics: D, objective: O, initial_belief: DVector<f64>, initial_controls: Vec<DVector<f64>>) -> Result<Self> {
        if initial_controls.len() < 2 {
            return Err(Error::config(
                "horizon",
                format!("need at least 2 steps, got {}", initial_controls.len()),
            ));
        }
        if initial_belief.len() != dynamics.belief_dim() {
            return Err(Error::Dimension {
                context: "initial belief",
                expected: dynamics.belief_dim(),
                actual: initial_belief.len(),
            });
        }
        if let Some(u) = initial_controls.iter().find(|u| u.len() != dynamics.control_dim()) {
            return Err(Error::Dimension {
                context: "initial controls",
                expected: dynamics.control_dim(),
                actual: u.len(),
            });
        }
        Ok(Self {
            dynamics,
            objective,
            initial_belief,
            initial_controls,
        })
    }

    pub fn horizon(&self) -> usize {
        self.initial_controls.len()
    }
}

/// Iteration limits, tolerances and the multiplier/penalty schedule.
/// Schedule values are in units of each constraint's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_inner_iterations: usize,
    pub inner_tolerance: f64,
    pub reg_initial: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    /// Step sizes `1, 1/2, ..., 2^-line_search_halvings`.
    pub line_search_halvings: u32,
    pub max_outer_iterations: usize,
    pub lambda_initial: f64,
    /// Multipliers of slack constraints decay quadratically; this keeps them representable.
    pub lambda_min: f64,
    pub mu_initial: f64,
    pub mu_max: f64,
    pub penalty_growth: f64,
    pub threshold_decay: f64,
    pub feasibility_tolerance: f64,
    pub outer_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_inner_iterations: 100,
            inner_tolerance: 1e-4,
            reg_initial: 1e-6,
            reg_min: 1e-8,
            reg_max: 1e8,
            reg_increase: 10.0,
            reg_decrease: 2.0,
            line_search_halvings: 10,
            max_outer_iterations: 30,
            lambda_initial: 1.0,
            lambda_min: 1e-10,
            mu_initial: 10.0,
            mu_max: 1e8,
            penalty_growth: 5.0,
            threshold_decay: 5.0,
            feasibility_tolerance: 1e-6,
            outer_tolerance: 1e-4,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("solver.inner_tolerance", self.inner_tolerance),
            ("solver.reg_initial", self.reg_initial),
            ("solver.reg_min", self.reg_min),
            ("solver.lambda_initial", self.lambda_initial),
            ("solver.lambda_min", self.lambda_min),
            ("solver.mu_initial", self.mu_initial),
            ("solver.feasibility_tolerance", self.feasibility_tolerance),
            ("solver.outer_tolerance", self.outer_tolerance),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        let above_one = [
            ("solver.reg_increase", self.reg_increase),
            ("solver.reg_decrease", self.reg_decrease),
            ("solver.penalty_growth", self.penalty_growth),
            ("solver.threshold_decay", self.threshold_decay),
        ];
        for (path, v) in above_one {
            if !(v > 1.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must exceed 1, got {v}")));
            }
        }
        if !(self.reg_max >= self.reg_min && self.mu_max >= self.mu_initial) {
            return Err(Error::config("solver", "caps must not be below their initial values"));
        }
        if self.max_inner_iterations == 0 || self.max_outer_iterations == 0 {
            return Err(Error::config("solver", "iteration limits must be at least 1"));
        }
        Ok(())
    }
}
