use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{CostExpansion, Dynamics, Linearization, Objective, Policy, SolverSettings, Trajectory};
use crate::error::{Error, Result};

/// Dynamics and cost expansions along a trajectory.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub dynamics: Vec<Linearization>,
    pub stage: Vec<CostExpansion>,
    pub terminal: CostExpansion,
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
    /// Predicted change `eps * d1 + eps^2 * d2` for step size `eps`.
    pub d1: f64,
    pub d2: f64,
    /// Expected cost-to-go at the initial belief, including noise offsets.
    pub value: f64,
    /// `false` when the regularized `Q_uu` was not positive definite.
    pub ok: bool,
}

impl BackwardPass {
    pub fn expected_change(&self, eps: f64) -> f64 {
        eps * self.d1 + eps * eps * self.d2
    }
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub policy: Policy,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub accepted_costs: Vec<f64>,
}

pub fn trajectory_cost<O: Objective>(objective: &O, traj: &Trajectory) -> f64 {
    let stage: f64 = traj
        .controls
        .iter()
        .enumerate()
        .map(|(k, u)| objective.stage_cost(k, &traj.beliefs[k], u))
        .sum();
    stage + objective.terminal_cost(&traj.beliefs[traj.horizon()])
}

/// Open-loop rollout of `controls` from `b0`; returns the trajectory and its cost.
pub fn rollout<D: Dynamics, O: Objective>(
    dynamics: &D,
    objective: &O,
    b0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<(Trajectory, f64)> {
    let mut beliefs = Vec::with_capacity(controls.len() + 1);
    beliefs.push(b0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = dynamics.step(&beliefs[k], u)?;
        finite(&next, k, "rollout belief")?;
        beliefs.push(next);
    }
    let traj = Trajectory {
        beliefs,
        controls: controls.to_vec(),
    };
    let cost = trajectory_cost(objective, &traj);
    if !cost.is_finite() {
        return Err(Error::non_finite("rollout cost"));
    }
    Ok((traj, cost))
}

fn finite(v: &DVector<f64>, k: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{what} at timestep {k}")))
    }
}

/// Linearizes the dynamics and expands the costs at every timestep.
pub fn expand<D: Dynamics, O: Objective>(dynamics: &D, objective: &O, traj: &Trajectory) -> Result<Expansion> {
    let steps: Vec<(Linearization, CostExpansion)> = (0..traj.horizon())
        .into_par_iter()
        .map(|k| {
            let (b, u) = (&traj.beliefs[k], &traj.controls[k]);
            Ok((dynamics.linearize(b, u)?, objective.stage_expansion(k, b, u)))
        })
        .collect::<Result<_>>()?;
    let (lins, stage) = steps.into_iter().unzip();
    Ok(Expansion {
        dynamics: lins,
        stage,
        terminal: objective.terminal_expansion(&traj.beliefs[traj.horizon()]),
    })
}

/// Riccati-like recursion for the local affine policy.
pub fn backward_pass(exp: &Expansion, reg: f64) -> Result<BackwardPass> {
    let horizon = exp.stage.len();
    let mut v_b = exp.terminal.b.clone();
    let mut v_bb = exp.terminal.bb.clone();
    let mut value = exp.terminal.value;
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let mut feedback = vec![DMatrix::zeros(0, 0); horizon];
    let (mut d1, mut d2) = (0.0, 0.0);

    for k in (0..horizon).rev() {
        let lin = &exp.dynamics[k];
        let c = &exp.stage[k];
        let g_b_t = lin.g_b.transpose();
        let g_u_t = lin.g_u.transpose();
        let vg_b = &v_bb * &lin.g_b;

        let mut q_b = &c.b + &g_b_t * &v_b;
        let mut q_u = &c.u + &g_u_t * &v_b;
        let mut q_bb = &c.bb + &g_b_t * &vg_b;
        let mut q_uu = &c.uu + &g_u_t * &v_bb * &lin.g_u;
        let mut q_ub = &c.ub + &g_u_t * &vg_b;
        let mut q0 = c.value + value;

        for (i, w) in lin.w.column_iter().enumerate() {
            let vw = &v_bb * w;
            let (w_b, w_u) = (&lin.w_b[i], &lin.w_u[i]);
            let w_u_t = w_u.transpose();
            let vw_b = &v_bb * w_b;
            q_b += w_b.transpose() * &vw;
            q_u += &w_u_t * &vw;
            q_bb += w_b.transpose() * &vw_b;
            q_uu += &w_u_t * &v_bb * w_u;
            q_ub += &w_u_t * &vw_b;
            q0 += 0.5 * w.dot(&vw);
        }

        let all_finite = q0.is_finite()
            && [&q_b, &q_u].iter().all(|v| v.iter().all(|x| x.is_finite()))
            && [&q_bb, &q_uu, &q_ub].iter().all(|m| m.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::non_finite(format!("backward pass Q terms at timestep {k}")));
        }

        let m = q_u.len();
        let q_uu = 0.5 * (&q_uu + q_uu.transpose());
        let regularized = &q_uu + DMatrix::identity(m, m) * reg;
        let Some(chol) = regularized.cholesky() else {
            return Ok(BackwardPass {
                feedforward,
                feedback,
                d1,
                d2,
                value,
                ok: false,
            });
        };
        let kff = -chol.solve(&q_u);
        let kfb = -chol.solve(&q_ub);

        d1 += kff.dot(&q_u);
        d2 += 0.5 * kff.dot(&(&q_uu * &kff));

        let kfb_t = kfb.transpose();
        let q_ub_t = q_ub.transpose();
        v_b = &q_b + &kfb_t * &q_uu * &kff + &kfb_t * &q_u + &q_ub_t * &kff;
        let vbb = &q_bb + &kfb_t * &q_uu * &kfb + &kfb_t * &q_ub + &q_ub_t * &kfb;
        v_bb = 0.5 * (&vbb + vbb.transpose());
        value = q0 + 0.5 * kff.dot(&(&q_uu * &kff)) + kff.dot(&q_u);

        feedforward[k] = kff;
        feedback[k] = kfb;
    }

    Ok(BackwardPass {
        feedforward,
        feedback,
        d1,
        d2,
        value,
        ok: true,
    })
}

/// Closed-loop rollout of `u = u_bar + eps * k + L (b - b_bar)` from the nominal's start.
pub fn forward_pass<D: Dynamics, O: Objective>(
    dynamics: &D,
    objective: &O,
    nominal: &Trajectory,
    bp: &BackwardPass,
    eps: f64,
) -> Result<(Trajectory, f64)> {
    let horizon = nominal.horizon();
    let mut beliefs = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    beliefs.push(nominal.beliefs[0].clone());
    for k in 0..horizon {
        let db = &beliefs[k] - &nominal.beliefs[k];
        let u = &nominal.controls[k] + &bp.feedforward[k] * eps + &bp.feedback[k] * db;
        finite(&u, k, "forward pass control")?;
        let next = dynamics.step(&beliefs[k], &u)?;
        finite(&next, k, "forward pass belief")?;
        beliefs.push(next);
        controls.push(u);
    }
    let traj = Trajectory { beliefs, controls };
    let cost = trajectory_cost(objective, &traj);
    if !cost.is_finite() {
        return Err(Error::non_finite("forward pass cost"));
    }
    Ok((traj, cost))
}

/// Unconstrained iLQG from a warm-start control sequence.
pub fn inner_solve<D: Dynamics, O: Objective>(
    dynamics: &D,
    objective: &O,
    b0: &DVector<f64>,
    warm_controls: &[DVector<f64>],
    settings: &SolverSettings,
) -> Result<InnerResult> {
    let (mut traj, mut cost) = rollout(dynamics, objective, b0, warm_controls)?;
    let mut exp = expand(dynamics, objective, &traj)?;
    let mut reg = settings.reg_initial;
    let mut accepted_costs = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    let mut current: Option<BackwardPass> = None;

    while iterations < settings.max_inner_iterations {
        iterations += 1;
        let bp = backward_pass(&exp, reg)?;
        if !bp.ok {
            reg *= settings.reg_increase;
            if reg > settings.reg_max {
                break;
            }
            continue;
        }
        if -bp.expected_change(1.0) <= settings.inner_tolerance * cost.abs() {
            current = Some(bp);
            converged = true;
            break;
        }

        let mut accepted = None;
        for i in 0..=settings.line_search_halvings {
            let eps = 0.5f64.powi(i as i32);
            if let Ok((t, c)) = forward_pass(dynamics, objective, &traj, &bp, eps) {
                if c < cost {
                    accepted = Some((t, c));
                    break;
                }
            }
        }

        match accepted {
            Some((t, c)) => {
                let improvement = (cost - c) / cost.abs().max(f64::MIN_POSITIVE);
                traj = t;
                cost = c;
                accepted_costs.push(c);
                reg = (reg / settings.reg_decrease).max(settings.reg_min);
                exp = expand(dynamics, objective, &traj)?;
                if improvement < settings.inner_tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                reg *= settings.reg_increase;
                if reg > settings.reg_max {
                    break;
                }
            }
        }
    }

    // gains must belong to the nominal that is returned
    let bp = match current {
        Some(bp) => bp,
        None => final_gains(&exp, reg.min(settings.reg_max), settings)?,
    };
    let policy = Policy {
        nominal_beliefs: traj.beliefs,
        nominal_controls: traj.controls,
        feedforward: bp.feedforward,
        feedback: bp.feedback,
    };
    Ok(InnerResult {
        policy,
        cost,
        converged,
        iterations,
        accepted_costs,
    })
}

fn final_gains(exp: &Expansion, mut reg: f64, settings: &SolverSettings) -> Result<BackwardPass> {
    loop {
        let bp = backward_pass(exp, reg)?;
        if bp.ok {
            return Ok(bp);
        }
        if reg >= settings.reg_max {
            // no usable local model; fall back to open loop
            let horizon = exp.stage.len();
            let n = exp.terminal.b.len();
            return Ok(BackwardPass {
                feedforward: exp.stage.iter().map(|c| DVector::zeros(c.u.len())).collect(),
                feedback: exp.stage.iter().map(|c| DMatrix::zeros(c.u.len(), n)).collect(),
                d1: 0.0,
                d2: 0.0,
                value: f64::NAN,
                ok: horizon == 0,
            });
        }
        reg = (reg * settings.reg_increase).min(settings.reg_max);
    }
}
