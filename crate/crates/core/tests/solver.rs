use std::path::Path;

use bsp_core::io::commands::solve;
use bsp_core::io::scenario::{ConstraintConfig, ScenarioConfig, SolverMode};
use bsp_core::solver::{
    backward_pass, expand, inner_solve, rollout, CostExpansion, Dynamics, Linearization, Objective, SolverProblem,
    SolverSettings, Trajectory,
};
use bsp_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `x' = A x + B u` with a constant noise matrix.
struct Linear {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl Dynamics for Linear {
    fn belief_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }

    fn linearize(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<Linearization> {
        let n = self.a.nrows();
        let cols = self.w.ncols();
        Ok(Linearization {
            g_b: self.a.clone(),
            g_u: self.b.clone(),
            w: self.w.clone(),
            w_b: vec![DMatrix::zeros(n, n); cols],
            w_u: vec![DMatrix::zeros(n, self.b.ncols()); cols],
        })
    }
}

struct Quadratic {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qf: DMatrix<f64>,
}

fn quad(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    0.5 * x.dot(&(m * x))
}

impl Objective for Quadratic {
    fn stage_cost(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        quad(x, &self.q) + quad(u, &self.r)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        quad(x, &self.qf)
    }

    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        CostExpansion {
            value: self.stage_cost(k, x, u),
            b: &self.q * x,
            u: &self.r * u,
            bb: self.q.clone(),
            uu: self.r.clone(),
            ub: DMatrix::zeros(u.len(), x.len()),
        }
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> CostExpansion {
        let mut e = CostExpansion::zeros(x.len(), 0);
        e.value = self.terminal_cost(x);
        e.b = &self.qf * x;
        e.bb = self.qf.clone();
        e
    }
}

fn random_lq(seed: u64) -> (Linear, Quadratic, DVector<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let m = 2;
    let a = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.2..0.2));
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let dynamics = Linear {
        a,
        b,
        w: DMatrix::zeros(n, 0),
    };
    let objective = Quadratic {
        q: DMatrix::identity(n, n) * 0.5,
        r: DMatrix::identity(m, m) * 0.2,
        qf: DMatrix::identity(n, n) * 10.0,
    };
    (dynamics, objective, x0, 20)
}

fn zero_controls(m: usize, horizon: usize) -> Vec<DVector<f64>> {
    vec![DVector::zeros(m); horizon]
}

#[test]
fn lq_converges_in_two_iterations() {
    let (dynamics, objective, x0, horizon) = random_lq(1);
    let settings = SolverSettings::default();
    let res = inner_solve(&dynamics, &objective, &x0, &zero_controls(2, horizon), &settings).unwrap();
    assert!(res.converged);
    assert!(res.iterations <= 2, "{} iterations", res.iterations);

    // Restarting at the optimum accepts nothing new.
    let warm = inner_solve(&dynamics, &objective, &x0, &res.policy.nominal_controls, &settings).unwrap();
    assert!(warm.converged);
    assert!(warm.iterations <= 1, "{} iterations", warm.iterations);
    assert!((warm.cost - res.cost).abs() <= 1e-9 * res.cost);
}

#[test]
fn accepted_costs_never_increase() {
    for seed in 0..5 {
        let (dynamics, objective, x0, horizon) = random_lq(seed);
        let res = inner_solve(&dynamics, &objective, &x0, &zero_controls(2, horizon), &SolverSettings::default()).unwrap();
        assert!(res.accepted_costs.windows(2).all(|w| w[1] <= w[0]), "{:?}", res.accepted_costs);
    }
    let cfg = ScenarioConfig::load(&scenario("map1_unicycle")).unwrap();
    let setup = bsp_core::io::commands::setup(&cfg).unwrap();
    let p = &setup.problem;
    let res = inner_solve(&p.dynamics, &p.objective, &p.initial_belief, &p.initial_controls, &setup.settings).unwrap();
    assert!(res.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    assert!(res.cost < res.accepted_costs[0]);
}

#[test]
fn zero_cost_gives_zero_gains() {
    let (dynamics, _, x0, horizon) = random_lq(2);
    let objective = Quadratic {
        q: DMatrix::zeros(3, 3),
        r: DMatrix::zeros(2, 2),
        qf: DMatrix::zeros(3, 3),
    };
    let (traj, _) = rollout(&dynamics, &objective, &x0, &zero_controls(2, horizon)).unwrap();
    let bp = backward_pass(&expand(&dynamics, &objective, &traj).unwrap(), 1e-6).unwrap();
    assert!(bp.feedforward.iter().all(|k| k.amax() == 0.0));
    assert!(bp.feedback.iter().all(|l| l.amax() == 0.0));
}

#[test]
fn constant_noise_only_shifts_the_value() {
    let (mut dynamics, objective, x0, horizon) = random_lq(3);
    let traj: Trajectory = rollout(&dynamics, &objective, &x0, &zero_controls(2, horizon)).unwrap().0;
    let plain = backward_pass(&expand(&dynamics, &objective, &traj).unwrap(), 0.0).unwrap();
    dynamics.w = DMatrix::from_row_slice(3, 2, &[0.3, 0.0, 0.1, 0.2, 0.0, -0.4]);
    let noisy = backward_pass(&expand(&dynamics, &objective, &traj).unwrap(), 0.0).unwrap();
    for k in 0..horizon {
        assert!((&plain.feedback[k] - &noisy.feedback[k]).amax() <= 1e-12);
        assert!((&plain.feedforward[k] - &noisy.feedforward[k]).amax() <= 1e-12);
    }
    assert!(noisy.value > plain.value);
}

#[test]
fn short_horizons_are_rejected() {
    let (dynamics, objective, x0, _) = random_lq(4);
    assert!(SolverProblem::new(dynamics, objective, x0, zero_controls(2, 1)).is_err());
}

fn scenario(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"))
}

#[test]
fn slack_bounds_match_the_unconstrained_solve() {
    let base = ScenarioConfig::load(&scenario("map1_holonomic")).unwrap();
    let mut slack = base.clone();
    slack.constraints = Some(ConstraintConfig {
        three_sigma: [1e3, 1e3, 1e3],
    });
    let mut free = base.clone();
    free.mode = SolverMode::Unconstrained;
    free.weights.information = [0.0; 3];
    let a = solve(&slack).unwrap();
    let b = solve(&free).unwrap();
    assert!(a.report.feasible);
    let rel = (a.report.final_cost - b.report.final_cost).abs() / b.report.final_cost;
    assert!(rel <= 1e-6, "{} vs {}", a.report.final_cost, b.report.final_cost);
}
