use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ilqg::{inner_solve, rollout, trajectory_cost};
use super::{CostExpansion, Dynamics, Objective, Policy, SolverProblem, SolverSettings, Trajectory};
use crate::error::Result;
use crate::objectives::{multiplier_update, penalty_derivatives, penalty_total, ALState};

/// Objective plus the penalty term of the current multiplier state.
/// Row `k` of the state prices the constraints on belief `k`; the last row
/// belongs to the terminal belief.
pub struct Augmented<'a, O> {
    pub objective: &'a O,
    pub al: &'a ALState,
}

impl<O: Objective> Augmented<'_, O> {
    fn penalty(&self, k: usize, b: &DVector<f64>) -> f64 {
        if self.objective.constraint_count() == 0 {
            return 0.0;
        }
        let psi = self.objective.constraint(k, b);
        penalty_total(
            &psi,
            self.al.lambda.row(k).transpose().as_slice(),
            self.al.mu.row(k).transpose().as_slice(),
        )
    }

    fn add_penalty(&self, k: usize, b: &DVector<f64>, e: &mut CostExpansion) {
        if self.objective.constraint_count() == 0 {
            return;
        }
        let psi = self.objective.constraint(k, b);
        let a = self.objective.constraint_jacobian(k, b);
        let (grad, curv) = penalty_derivatives(
            &psi,
            self.al.lambda.row(k).transpose().as_slice(),
            self.al.mu.row(k).transpose().as_slice(),
        );
        e.value += penalty_total(
            &psi,
            self.al.lambda.row(k).transpose().as_slice(),
            self.al.mu.row(k).transpose().as_slice(),
        );
        e.b += a.transpose() * grad;
        e.bb += a.transpose() * DMatrix::from_diagonal(&curv) * &a;
    }
}

impl<O: Objective> Objective for Augmented<'_, O> {
    fn stage_cost(&self, k: usize, b: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.objective.stage_cost(k, b, u) + self.penalty(k, b)
    }

    fn terminal_cost(&self, b: &DVector<f64>) -> f64 {
        self.objective.terminal_cost(b) + self.penalty(self.al.steps() - 1, b)
    }

    fn stage_expansion(&self, k: usize, b: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        let mut e = self.objective.stage_expansion(k, b, u);
        self.add_penalty(k, b, &mut e);
        e
    }

    fn terminal_expansion(&self, b: &DVector<f64>) -> CostExpansion {
        let mut e = self.objective.terminal_expansion(b);
        self.add_penalty(self.al.steps() - 1, b, &mut e);
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub cost: f64,
    pub augmented_cost: f64,
    /// Largest violation over all timesteps and constraints, in units of
    /// each constraint's scale. `None` without constraints.
    pub max_scaled_violation: Option<f64>,
    pub max_scaled_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Cost without the penalty terms.
    pub final_cost: f64,
    pub augmented_cost: f64,
    pub initial_cost: f64,
    /// Per constraint, the largest `psi` over the horizon (negative when slack).
    pub max_violation_per_constraint: Vec<f64>,
    pub constraint_scale: Vec<f64>,
    pub feasible: bool,
    pub history: Vec<OuterRecord>,
}

fn constraint_table<O: Objective>(objective: &O, traj: &Trajectory) -> DMatrix<f64> {
    let j = objective.constraint_count();
    let mut psi = DMatrix::zeros(traj.beliefs.len(), j);
    for (k, b) in traj.beliefs.iter().enumerate() {
        psi.row_mut(k).copy_from(&objective.constraint(k, b).transpose());
    }
    psi
}

fn column_max(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.max()).collect()
}

fn scaled_max(psi: &DMatrix<f64>, scale: &DVector<f64>) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (j, col) in psi.column_iter().enumerate() {
        worst = worst.max(col.max() / scale[j]);
    }
    worst
}

/// Augmented-Lagrangian outer loop around [`inner_solve`].
pub fn outer_solve<D: Dynamics, O: Objective>(
    problem: &SolverProblem<D, O>,
    settings: &SolverSettings,
) -> Result<(Policy, SolveReport)> {
    settings.validate()?;
    let objective = &problem.objective;
    let dynamics = &problem.dynamics;
    let b0 = &problem.initial_belief;
    let horizon = problem.horizon();
    let j = objective.constraint_count();
    let scale = objective.constraint_scale();

    let (initial, initial_cost) = rollout(dynamics, objective, b0, &problem.initial_controls)?;
    let initial_psi = constraint_table(objective, &initial);
    let start_threshold = scaled_max(&initial_psi, &scale).max(1.0) / settings.threshold_decay;

    let mut al = ALState::uniform(horizon + 1, j, 1.0, 1.0, 1.0);
    for c in 0..j {
        let s = scale[c];
        al.lambda.column_mut(c).fill(settings.lambda_initial / s);
        al.mu.column_mut(c).fill(settings.mu_initial / (s * s));
        al.threshold.column_mut(c).fill(start_threshold * s);
    }
    let lambda_floor: Vec<f64> = scale.iter().map(|s| settings.lambda_min / s).collect();
    let mu_cap: Vec<f64> = scale.iter().map(|s| settings.mu_max / (s * s)).collect();

    let mut controls = initial.controls;
    let mut history = Vec::new();
    let mut inner_total = 0;
    let mut previous_cost: Option<f64> = None;
    let mut converged = false;

    loop {
        let iteration = history.len() + 1;
        let inner = inner_solve(dynamics, &Augmented { objective, al: &al }, b0, &controls, settings)?;
        inner_total += inner.iterations;
        let traj = inner.policy.trajectory();
        let cost = trajectory_cost(objective, &traj);
        let psi = constraint_table(objective, &traj);
        let worst = if j == 0 { f64::NEG_INFINITY } else { scaled_max(&psi, &scale) };
        let feasible = worst <= settings.feasibility_tolerance;
        let max_scaled_mu = (0..j)
            .map(|c| al.mu.column(c).max() * scale[c] * scale[c])
            .fold(0.0, f64::max);
        history.push(OuterRecord {
            iteration,
            inner_iterations: inner.iterations,
            inner_converged: inner.converged,
            cost,
            augmented_cost: inner.cost,
            max_scaled_violation: (j > 0).then_some(worst),
            max_scaled_mu,
        });
        controls = traj.controls.clone();

        let settled = j == 0
            || previous_cost.is_some_and(|p| (cost - p).abs() <= settings.outer_tolerance * p.abs());
        if feasible && settled {
            converged = inner.converged;
            return Ok(finish(inner.policy, inner.cost, cost, initial_cost, &psi, &scale, feasible, converged, inner_total, history));
        }
        if iteration >= settings.max_outer_iterations {
            return Ok(finish(inner.policy, inner.cost, cost, initial_cost, &psi, &scale, feasible, converged, inner_total, history));
        }

        let mut capped = false;
        for k in 0..=horizon {
            for c in 0..j {
                if psi[(k, c)] < al.threshold[(k, c)] {
                    al.lambda[(k, c)] =
                        multiplier_update(al.lambda[(k, c)], al.mu[(k, c)], psi[(k, c)]).max(lambda_floor[c]);
                    al.threshold[(k, c)] /= settings.threshold_decay;
                } else if al.mu[(k, c)] >= mu_cap[c] {
                    capped = true;
                } else {
                    al.mu[(k, c)] = (al.mu[(k, c)] * settings.penalty_growth).min(mu_cap[c]);
                }
            }
        }
        if capped {
            return Ok(finish(inner.policy, inner.cost, cost, initial_cost, &psi, &scale, feasible, converged, inner_total, history));
        }
        previous_cost = Some(cost);
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    policy: Policy,
    augmented_cost: f64,
    cost: f64,
    initial_cost: f64,
    psi: &DMatrix<f64>,
    scale: &DVector<f64>,
    feasible: bool,
    converged: bool,
    inner_iterations: usize,
    history: Vec<OuterRecord>,
) -> (Policy, SolveReport) {
    let report = SolveReport {
        converged,
        outer_iterations: history.len(),
        inner_iterations,
        final_cost: cost,
        augmented_cost,
        initial_cost,
        max_violation_per_constraint: column_max(psi),
        constraint_scale: scale.iter().copied().collect(),
        feasible,
        history,
    };
    (policy, report)
}
