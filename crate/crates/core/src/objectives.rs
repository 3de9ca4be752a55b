//! Costs, covariance-bound constraints and the augmented-Lagrangian penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{max_eigenvalue, unvech, vech_index, wrap_angle, Belief, StateVector};
use crate::diff::{numeric_gradient_hessian, HESSIAN_STEP};
use crate::error::{Error, Result};
use crate::sensing::Obstacle;
use crate::solver::{CostExpansion, Objective};

/// Diagonal weights of the stage and terminal costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Terminal goal-error weight.
    pub terminal: Vec<f64>,
    /// Weight on covariance diagonal entries (information cost).
    pub information: Vec<f64>,
    pub control: Vec<f64>,
    pub collision: f64,
    pub goal: StateVector,
}

impl CostWeights {
    pub fn validate(&self, control_dim: usize) -> Result<()> {
        let lens = [
            ("weights.terminal", self.terminal.len(), StateVector::DIM),
            ("weights.information", self.information.len(), StateVector::DIM),
            ("weights.control", self.control.len(), control_dim),
        ];
        for (path, len, expected) in lens {
            if len != expected {
                return Err(Error::config(path, format!("expected {expected} entries, got {len}")));
            }
        }
        let all = self
            .terminal
            .iter()
            .chain(&self.information)
            .chain(&self.control)
            .chain(std::iter::once(&self.collision));
        if all.clone().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("weights", "weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Upper bounds on selected covariance entries: `psi(b) = A b - sigma_max <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub selector: DMatrix<f64>,
    /// Variance bounds, one per selector row.
    pub bounds: DVector<f64>,
}

impl ConstraintSpec {
    pub fn none(belief_dim: usize) -> Self {
        Self {
            selector: DMatrix::zeros(0, belief_dim),
            bounds: DVector::zeros(0),
        }
    }

    /// Bounds on the variance of each listed state axis.
    pub fn diagonal(n: usize, axes: &[usize], variance_bounds: &[f64]) -> Result<Self> {
        if axes.len() != variance_bounds.len() {
            return Err(Error::Dimension {
                context: "constraint bounds",
                expected: axes.len(),
                actual: variance_bounds.len(),
            });
        }
        let dim = n + n * (n + 1) / 2;
        let mut selector = DMatrix::zeros(axes.len(), dim);
        for (j, (&axis, &bound)) in axes.iter().zip(variance_bounds).enumerate() {
            if axis >= n {
                return Err(Error::config("constraints", format!("axis {axis} out of range")));
            }
            if bound.is_nan() || bound <= 0.0 {
                return Err(Error::config(
                    format!("constraints.bounds[{j}]"),
                    format!("must be positive, got {bound}"),
                ));
            }
            selector[(j, n + vech_index(axis, axis, n))] = 1.0;
        }
        Ok(Self {
            selector,
            bounds: DVector::from_row_slice(variance_bounds),
        })
    }

    /// `x`, `y`, `theta` bounds from user-facing 3-sigma values.
    pub fn from_three_sigma(three_sigma: [f64; 3]) -> Result<Self> {
        let var = three_sigma.map(|s| (s / 3.0).powi(2));
        if three_sigma.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::config("constraints.three_sigma", "3-sigma bounds must be positive"));
        }
        Self::diagonal(3, &[0, 1, 2], &var)
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }
}

/// Multiplier estimates, penalty parameters and violation thresholds, one row per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ALState {
    pub lambda: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub threshold: DMatrix<f64>,
}

impl ALState {
    pub fn uniform(steps: usize, constraints: usize, lambda: f64, mu: f64, threshold: f64) -> Self {
        Self {
            lambda: DMatrix::from_element(steps, constraints, lambda),
            mu: DMatrix::from_element(steps, constraints, mu),
            threshold: DMatrix::from_element(steps, constraints, threshold),
        }
    }

    pub fn steps(&self) -> usize {
        self.lambda.nrows()
    }
}

pub fn stage_cost(b: &Belief, u: &DVector<f64>, w: &CostWeights, obstacles: &[Obstacle]) -> f64 {
    let control: f64 = u.iter().zip(&w.control).map(|(ui, s)| s * ui * ui).sum();
    control + information_cost(b, w) + collision_cost(b, w.collision, obstacles)
}

fn information_cost(b: &Belief, w: &CostWeights) -> f64 {
    let n = b.state_dim();
    (0..n)
        .map(|i| w.information[i] * b.cov_vech[vech_index(i, i, n)])
        .sum()
}

fn collision_cost(b: &Belief, weight: f64, obstacles: &[Obstacle]) -> f64 {
    if weight == 0.0 || obstacles.is_empty() {
        return 0.0;
    }
    let n = b.state_dim();
    let Ok(cov) = unvech(b.cov_vech.as_slice(), n) else {
        return f64::NAN;
    };
    let spread = max_eigenvalue(&cov);
    let p = [b.mean[0], b.mean[1]];
    weight
        * obstacles
            .iter()
            .map(|o| (-o.surface_distance(p) / spread).exp())
            .sum::<f64>()
}

fn goal_error(b: &Belief, goal: &StateVector) -> [f64; 3] {
    [
        b.mean[0] - goal.x,
        b.mean[1] - goal.y,
        wrap_angle(b.mean[2] - goal.theta),
    ]
}

pub fn terminal_cost(b: &Belief, w: &CostWeights) -> f64 {
    let e = goal_error(b, &w.goal);
    let quad: f64 = e.iter().zip(&w.terminal).map(|(ei, s)| s * ei * ei).sum();
    quad + information_cost(b, w)
}

pub fn constraint_eval(b: &Belief, spec: &ConstraintSpec) -> DVector<f64> {
    &spec.selector * b.to_vector() - &spec.bounds
}

/// Smooth PHR-type penalty.
pub fn penalty_phi(t: f64) -> f64 {
    if t >= -0.5 {
        0.5 * t * t + t
    } else {
        -0.25 * (-2.0 * t).ln() - 0.375
    }
}

pub fn penalty_phi_prime(t: f64) -> f64 {
    if t >= -0.5 {
        t + 1.0
    } else {
        -1.0 / (4.0 * t)
    }
}

pub fn penalty_phi_second(t: f64) -> f64 {
    if t >= -0.5 {
        1.0
    } else {
        1.0 / (4.0 * t * t)
    }
}

/// `sum_j lambda_j^2 / mu_j * phi(mu_j / lambda_j * psi_j)`.
pub fn penalty_total(psi: &DVector<f64>, lambda: &[f64], mu: &[f64]) -> f64 {
    psi.iter()
        .zip(lambda.iter().zip(mu))
        .map(|(p, (l, m))| l * l / m * penalty_phi(m / l * p))
        .sum()
}

/// Penalty derivatives with respect to `psi`: first and (diagonal) second.
pub fn penalty_derivatives(psi: &DVector<f64>, lambda: &[f64], mu: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let mut grad = DVector::zeros(psi.len());
    let mut curv = DVector::zeros(psi.len());
    for j in 0..psi.len() {
        let t = mu[j] / lambda[j] * psi[j];
        grad[j] = lambda[j] * penalty_phi_prime(t);
        curv[j] = mu[j] * penalty_phi_second(t);
    }
    (grad, curv)
}

/// `lambda' = lambda * phi'(mu / lambda * psi)`.
pub fn multiplier_update(lambda: f64, mu: f64, psi: f64) -> f64 {
    lambda * penalty_phi_prime(mu / lambda * psi)
}

/// Goal, information and collision costs with covariance-bound constraints.
#[derive(Debug, Clone)]
pub struct BeliefCost {
    pub weights: CostWeights,
    pub constraints: ConstraintSpec,
    pub obstacles: Vec<Obstacle>,
}

impl BeliefCost {
    fn add_collision(&self, b: &DVector<f64>, e: &mut CostExpansion) {
        if self.weights.collision == 0.0 || self.obstacles.is_empty() {
            return;
        }
        let f = |bp: &DVector<f64>| match Belief::from_vector(bp) {
            Ok(bel) => collision_cost(&bel, self.weights.collision, &self.obstacles),
            Err(_) => f64::NAN,
        };
        let (g, h) = numeric_gradient_hessian(f, b, HESSIAN_STEP);
        e.b += g;
        e.bb += h;
    }

    fn add_information(&self, n: usize, e: &mut CostExpansion) {
        for i in 0..n {
            e.b[n + vech_index(i, i, n)] += self.weights.information[i];
        }
    }
}

impl Objective for BeliefCost {
    fn stage_cost(&self, _k: usize, b: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match Belief::from_vector(b) {
            Ok(bel) => stage_cost(&bel, u, &self.weights, &self.obstacles),
            Err(_) => f64::NAN,
        }
    }

    fn terminal_cost(&self, b: &DVector<f64>) -> f64 {
        match Belief::from_vector(b) {
            Ok(bel) => terminal_cost(&bel, &self.weights),
            Err(_) => f64::NAN,
        }
    }

    fn stage_expansion(&self, k: usize, b: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        let n = StateVector::DIM;
        let mut e = CostExpansion::zeros(b.len(), u.len());
        e.value = self.stage_cost(k, b, u);
        for i in 0..u.len() {
            e.u[i] = 2.0 * self.weights.control[i] * u[i];
            e.uu[(i, i)] = 2.0 * self.weights.control[i];
        }
        self.add_information(n, &mut e);
        self.add_collision(b, &mut e);
        e
    }

    fn terminal_expansion(&self, b: &DVector<f64>) -> CostExpansion {
        let n = StateVector::DIM;
        let mut e = CostExpansion::zeros(b.len(), 0);
        e.value = self.terminal_cost(b);
        let err = goal_error(
            &Belief {
                mean: b.rows(0, n).into_owned(),
                cov_vech: b.rows(n, b.len() - n).into_owned(),
            },
            &self.weights.goal,
        );
        for (i, (w, d)) in self.weights.terminal.iter().zip(err.iter()).enumerate() {
            e.b[i] = 2.0 * w * d;
            e.bb[(i, i)] = 2.0 * w;
        }
        self.add_information(n, &mut e);
        e
    }

    fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    fn constraint(&self, _k: usize, b: &DVector<f64>) -> DVector<f64> {
        &self.constraints.selector * b - &self.constraints.bounds
    }

    fn constraint_jacobian(&self, _k: usize, _b: &DVector<f64>) -> DMatrix<f64> {
        self.constraints.selector.clone()
    }

    fn constraint_scale(&self) -> DVector<f64> {
        self.constraints.bounds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::numeric_jacobian;
    use proptest::prelude::*;

    fn weights() -> CostWeights {
        CostWeights {
            terminal: vec![100.0, 100.0, 10.0],
            information: vec![0.0; 3],
            control: vec![2.0; 3],
            collision: 0.0,
            goal: StateVector::new(0.0, 0.0, 0.0),
        }
    }

    fn belief(mean: [f64; 3], diag: [f64; 3]) -> Belief {
        Belief::new(
            DVector::from_row_slice(&mean),
            &DMatrix::from_diagonal(&DVector::from_row_slice(&diag)),
        )
        .unwrap()
    }

    #[test]
    fn stage_cost_examples() {
        let w = weights();
        let b = belief([0.0; 3], [0.01; 3]);
        assert_eq!(stage_cost(&b, &DVector::zeros(3), &w, &[]), 0.0);
        assert_eq!(stage_cost(&b, &DVector::from_vec(vec![1.0, 0.0, 0.0]), &w, &[]), 2.0);

        let mut w = weights();
        w.collision = 10.0;
        let b = belief([0.0, 0.0, 0.0], [0.25, 0.1, 0.05]);
        let obstacle = Obstacle {
            center: [1.5, 0.0],
            radius: 0.5,
        };
        let c = stage_cost(&b, &DVector::zeros(3), &w, &[obstacle]);
        assert!((c - 10.0 * (-4.0f64).exp()).abs() < 1e-12);
        assert!((c - 0.1832).abs() < 1e-4);
    }

    #[test]
    fn terminal_cost_examples() {
        let mut w = weights();
        assert_eq!(terminal_cost(&belief([0.0; 3], [0.01; 3]), &w), 0.0);
        assert!((terminal_cost(&belief([1.0, 0.0, 0.0], [0.01; 3]), &w) - 100.0).abs() < 1e-12);
        w.information = vec![1.0; 3];
        assert!((terminal_cost(&belief([0.0; 3], [0.01; 3]), &w) - 0.03).abs() < 1e-12);
        // heading error wraps: 2 pi - 0.1 is a 0.1 rad miss
        w.information = vec![0.0; 3];
        let c = terminal_cost(&belief([0.0, 0.0, 2.0 * std::f64::consts::PI - 0.1], [0.01; 3]), &w);
        assert!((c - 10.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn constraint_examples() {
        let spec = ConstraintSpec::from_three_sigma([0.25, 0.25, 0.2]).unwrap();
        let psi = constraint_eval(&belief([0.0; 3], [0.004, 0.0, 0.01]), &spec);
        assert!((psi[0] - (0.004 - (0.25f64 / 3.0).powi(2))).abs() < 1e-15);
        assert!((psi[0] + 0.002944).abs() < 1e-6);
        assert!((psi[2] - 0.005556).abs() < 1e-6);
        let at = belief([0.0; 3], [(0.25f64 / 3.0).powi(2), 0.0, 0.0]);
        assert_eq!(constraint_eval(&at, &spec)[0], 0.0);
        assert!(ConstraintSpec::from_three_sigma([0.25, 0.0, 0.2]).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_phi(0.0), 0.0);
        assert_eq!(penalty_phi_prime(0.0), 1.0);
        assert_eq!(penalty_phi(1.0), 1.5);
        assert!((penalty_phi(-2.0) - (-0.25 * 4f64.ln() - 0.375)).abs() < 1e-15);
        assert!((penalty_phi(-2.0) + 0.72157).abs() < 1e-5);

        let one = |p: f64, l: f64, m: f64| penalty_total(&DVector::from_element(1, p), &[l], &[m]);
        assert_eq!(penalty_total(&DVector::zeros(3), &[1.0; 3], &[1.0; 3]), 0.0);
        assert_eq!(one(1.0, 1.0, 2.0), 2.0);
        assert!((one(-10.0, 1.0, 1.0) - (-0.25 * 20f64.ln() - 0.375)).abs() < 1e-12);

        assert_eq!(multiplier_update(1.3, 4.0, 0.0), 1.3);
        assert_eq!(multiplier_update(1.0, 1.0, 1.0), 2.0);
        assert!((multiplier_update(1.0, 1.0, -10.0) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn penalty_branches_meet() {
        let left = -0.25 * 1f64.ln() - 0.375;
        assert!((left - penalty_phi(-0.5)).abs() < 1e-12);
        assert!((-1.0 / (4.0 * -0.5) - penalty_phi_prime(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn large_violation_approaches_quadratic_penalty() {
        let (l, m) = (1.0, 10.0);
        let psi = 20.0; // mu / lambda * psi = 200
        let quad = m / 2.0 * psi * psi + l * psi;
        let p = penalty_total(&DVector::from_element(1, psi), &[l], &[m]);
        assert!(((p - quad) / quad).abs() < 0.01);
    }

    #[test]
    fn penalty_gradient_matches_selector_chain() {
        let spec = ConstraintSpec::from_three_sigma([0.25, 0.25, 0.2]).unwrap();
        let b = belief([0.1, 0.2, 0.3], [0.008, 0.005, 0.003]).to_vector();
        let lambda = [0.5, 2.0, 1.0];
        let mu = [40.0, 800.0, 3000.0];
        let total = |bp: &DVector<f64>| {
            let psi = &spec.selector * bp - &spec.bounds;
            Ok(DVector::from_element(1, penalty_total(&psi, &lambda, &mu)))
        };
        let fd = numeric_jacobian(total, &b, 1e-7).unwrap();
        let psi = &spec.selector * &b - &spec.bounds;
        let (g, _) = penalty_derivatives(&psi, &lambda, &mu);
        let analytic = spec.selector.transpose() * g;
        assert!((fd.transpose() - analytic).amax() < 1e-6);
    }

    #[test]
    fn expansion_matches_finite_differences() {
        let mut w = weights();
        w.information = vec![3.0, 1.0, 0.5];
        w.collision = 5.0;
        w.goal = StateVector::new(2.0, -1.0, 0.4);
        let cost = BeliefCost {
            weights: w,
            constraints: ConstraintSpec::none(9),
            obstacles: vec![Obstacle {
                center: [0.6, 0.3],
                radius: 0.2,
            }],
        };
        let b = belief([0.1, 0.0, 0.2], [0.2, 0.15, 0.1]).to_vector();
        let u = DVector::from_vec(vec![0.3, -0.1, 0.2]);
        let e = cost.stage_expansion(0, &b, &u);
        let fd = numeric_jacobian(|bp| Ok(DVector::from_element(1, cost.stage_cost(0, bp, &u))), &b, 1e-6).unwrap();
        assert!((fd.transpose() - &e.b).amax() < 1e-5 * e.b.amax().max(1.0));
        let t = cost.terminal_expansion(&b);
        let fd = numeric_jacobian(|bp| Ok(DVector::from_element(1, cost.terminal_cost(bp))), &b, 1e-6).unwrap();
        assert!((fd.transpose() - &t.b).amax() < 1e-5);
    }

    proptest! {
        #[test]
        fn phi_is_convex(a in -50.0f64..50.0, d1 in 1e-3f64..20.0, d2 in 1e-3f64..20.0) {
            let (t1, t3) = (a, a + d1 + d2);
            let t2 = 0.5 * (t1 + t3);
            prop_assert!(penalty_phi(t2) <= 0.5 * (penalty_phi(t1) + penalty_phi(t3)) + 1e-12);
        }

        #[test]
        fn multipliers_stay_positive(l in 1e-6f64..1e6, m in 1e-6f64..1e8, psi in -1e6f64..1e6) {
            let next = multiplier_update(l, m, psi);
            prop_assert!(next > 0.0 && next.is_finite());
        }
    }
}
