//! Closed-loop execution of a policy with sampled noise and an EKF estimator.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{sqrt_psd, vech_index, wrap_angle, Belief, StateVector};
use crate::dynamics::{BeliefModel, Measurement, NoiseWeighting, ObservationModel};
use crate::error::{Error, Result};
use crate::motion::ProcessModel;
use crate::objectives::ConstraintSpec;
use crate::solver::Policy;

/// Which features the estimator gets to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    /// Each feature is matched with its visibility probability at the true
    /// state; matched features are fused with the plain pixel noise.
    Bernoulli,
    /// The planner's update: every active feature, noise inflated by `1 / p`.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOptions {
    pub detection: DetectionMode,
    /// Sample the start state, process noise and pixel noise.
    pub noise: bool,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        Self {
            detection: DetectionMode::Bernoulli,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub seed: u64,
    pub true_states: Vec<StateVector>,
    pub estimated_beliefs: Vec<Belief>,
    pub applied_controls: Vec<DVector<f64>>,
    /// True minus estimated state, heading wrapped.
    pub estimation_errors: Vec<[f64; 3]>,
    pub planned_3sigma: Vec<[f64; 3]>,
    pub realized_3sigma: Vec<[f64; 3]>,
    pub detected: Vec<Vec<usize>>,
    /// Set when the estimator failed; the trace then stops early.
    pub diverged: bool,
}

impl ExecutionTrace {
    pub fn steps(&self) -> usize {
        self.applied_controls.len()
    }
}

fn three_sigma(b: &Belief) -> [f64; 3] {
    let v = b.variances();
    [0, 1, 2].map(|i| 3.0 * v[i].max(0.0).sqrt())
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn state(x: &DVector<f64>) -> StateVector {
    StateVector::new(x[0], x[1], x[2])
}

/// Runs the policy once from the start belief `b0`.
pub fn execute_once<P: ProcessModel, O: ObservationModel>(
    model: &BeliefModel<P, O>,
    policy: &Policy,
    b0: &Belief,
    seed: u64,
    options: ExecutionOptions,
) -> Result<ExecutionTrace> {
    policy.validate()?;
    if model.state_dim() != StateVector::DIM {
        return Err(Error::Dimension {
            context: "execution state",
            expected: StateVector::DIM,
            actual: model.state_dim(),
        });
    }
    if b0.dim() != model.belief_dim() || policy.nominal_beliefs[0].len() != b0.dim() {
        return Err(Error::Dimension {
            context: "execution start belief",
            expected: model.belief_dim(),
            actual: b0.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.state_dim();
    let q_sqrt = sqrt_psd(model.process.noise_cov());

    let mut x = b0.mean.clone();
    if options.noise {
        x += sqrt_psd(&b0.covariance()) * standard_normal(&mut rng, n);
    }
    let mut b = b0.clone();

    let horizon = policy.horizon();
    let planned: Vec<[f64; 3]> = policy
        .nominal_beliefs
        .iter()
        .map(|v| Belief::from_vector(v).map(|bb| three_sigma(&bb)))
        .collect::<Result<_>>()?;
    let mut trace = ExecutionTrace {
        seed,
        true_states: vec![state(&x)],
        estimated_beliefs: vec![b.clone()],
        applied_controls: Vec::with_capacity(horizon),
        estimation_errors: vec![error_of(&x, &b.mean)],
        planned_3sigma: planned,
        realized_3sigma: vec![three_sigma(&b)],
        detected: Vec::with_capacity(horizon),
        diverged: false,
    };

    for k in 0..horizon {
        let u = policy.control(k, &b.to_vector());
        let v = if options.noise {
            &q_sqrt * standard_normal(&mut rng, model.process.noise_dim())
        } else {
            DVector::zeros(model.process.noise_dim())
        };
        let step = model.process.step(&x, &u, &v).and_then(|next| {
            let (nb, ids) = estimate(model, &b, &u, &next, &mut rng, options)?;
            Ok((next, nb, ids))
        });
        let (next_x, next_b, ids) = match step {
            Ok(r) if r.1.to_vector().iter().all(|c| c.is_finite()) => r,
            _ => {
                trace.diverged = true;
                break;
            }
        };
        x = next_x;
        b = next_b;
        trace.applied_controls.push(u);
        trace.true_states.push(state(&x));
        trace.estimation_errors.push(error_of(&x, &b.mean));
        trace.realized_3sigma.push(three_sigma(&b));
        trace.estimated_beliefs.push(b.clone());
        trace.detected.push(ids);
    }
    Ok(trace)
}

fn error_of(x: &DVector<f64>, mean: &DVector<f64>) -> [f64; 3] {
    [x[0] - mean[0], x[1] - mean[1], wrap_angle(x[2] - mean[2])]
}

/// One EKF step of the execution-time estimator against true state `x_next`.
fn estimate<P: ProcessModel, O: ObservationModel>(
    model: &BeliefModel<P, O>,
    b: &Belief,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
    rng: &mut ChaCha8Rng,
    options: ExecutionOptions,
) -> Result<(Belief, Vec<usize>)> {
    let pred = model.predict(b, u)?;
    let (ids, weighting) = match options.detection {
        DetectionMode::Expected => (model.sensor.active_set(&pred.mean), NoiseWeighting::Visibility),
        DetectionMode::Bernoulli => {
            let mut ids = Vec::new();
            // one draw per channel per step keeps the random stream aligned across runs
            for id in model.sensor.channel_ids() {
                let draw: f64 = rng.random();
                if draw < model.sensor.detection_probability(x_next, id)
                    && model.sensor.predict(&pred.mean, &[id], NoiseWeighting::Unscaled).is_ok()
                {
                    ids.push(id);
                }
            }
            (ids, NoiseWeighting::Unscaled)
        }
    };
    if ids.is_empty() {
        let corr = model.correct(&pred, &Measurement::empty(model.state_dim()))?;
        return Ok((Belief::new(pred.mean, &corr.cov)?, ids));
    }
    let meas = model.sensor.predict(&pred.mean, &ids, weighting)?;
    let truth = model.sensor.predict(x_next, &ids, NoiseWeighting::Unscaled)?;
    let mut z = truth.predicted;
    if options.noise {
        z += sqrt_psd(&truth.noise_cov) * standard_normal(rng, z.len());
    }
    let corr = model.correct(&pred, &meas)?;
    let gain = corr.gain.as_ref().expect("non-empty measurement has a gain");
    let mean = &pred.mean + gain * (z - &meas.predicted);
    Ok((Belief::new(mean, &corr.cov)?, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub base_seed: u64,
    pub diverged_runs: usize,
    /// Per constraint: `(run, timestep)` pairs whose estimator covariance exceeded the bound.
    pub violation_counts: Vec<usize>,
    /// Same count on the planned covariances (identical for every run).
    pub planned_violation_counts: Vec<usize>,
    /// Per axis: fraction of `(run, timestep)` samples whose estimation error
    /// lies within the planned 3-sigma envelope.
    pub within_3sigma_fraction: [f64; 3],
    /// Mean final position distance between true state and goal, metres.
    pub mean_final_goal_error: f64,
    pub samples: usize,
}

/// Executes seeds `base_seed .. base_seed + runs` in parallel and aggregates them.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo<P: ProcessModel, O: ObservationModel>(
    model: &BeliefModel<P, O>,
    policy: &Policy,
    b0: &Belief,
    bounds: &ConstraintSpec,
    goal: &StateVector,
    runs: usize,
    base_seed: u64,
    options: ExecutionOptions,
) -> Result<(MonteCarloSummary, Vec<ExecutionTrace>)> {
    if runs == 0 {
        return Err(Error::Usage("Monte Carlo needs at least one run".into()));
    }
    let traces: Vec<ExecutionTrace> = (0..runs as u64)
        .into_par_iter()
        .map(|i| execute_once(model, policy, b0, base_seed.wrapping_add(i), options))
        .collect::<Result<_>>()?;
    Ok((summarize(&traces, policy, bounds, goal, base_seed)?, traces))
}

pub fn summarize(
    traces: &[ExecutionTrace],
    policy: &Policy,
    bounds: &ConstraintSpec,
    goal: &StateVector,
    base_seed: u64,
) -> Result<MonteCarloSummary> {
    let exceeded = |b: &DVector<f64>| -> Vec<bool> {
        let psi = &bounds.selector * b - &bounds.bounds;
        psi.iter().map(|p| *p > 0.0).collect()
    };
    let j = bounds.len();
    let mut planned_violation_counts = vec![0; j];
    for b in &policy.nominal_beliefs {
        for (c, hit) in exceeded(b).into_iter().enumerate() {
            planned_violation_counts[c] += hit as usize;
        }
    }

    let mut violation_counts = vec![0; j];
    let mut within = [0usize; 3];
    let mut samples = 0;
    let mut goal_error = 0.0;
    let mut finished = 0;
    for t in traces {
        for (k, b) in t.estimated_beliefs.iter().enumerate() {
            for (c, hit) in exceeded(&b.to_vector()).into_iter().enumerate() {
                violation_counts[c] += hit as usize;
            }
            let envelope = t.planned_3sigma[k];
            for axis in 0..3 {
                within[axis] += (t.estimation_errors[k][axis].abs() <= envelope[axis]) as usize;
            }
            samples += 1;
        }
        if !t.diverged {
            let last = t.true_states.last().expect("trace has a start state");
            goal_error += (last.x - goal.x).hypot(last.y - goal.y);
            finished += 1;
        }
    }
    let fraction = |c: usize| if samples == 0 { 0.0 } else { c as f64 / samples as f64 };
    Ok(MonteCarloSummary {
        runs: traces.len(),
        base_seed,
        diverged_runs: traces.iter().filter(|t| t.diverged).count(),
        violation_counts,
        planned_violation_counts,
        within_3sigma_fraction: within.map(fraction),
        mean_final_goal_error: if finished == 0 { f64::NAN } else { goal_error / finished as f64 },
        samples,
    })
}

/// Covariance diagonal of a belief vector over a 3-dimensional state.
pub fn covariance_diagonal(b: &DVector<f64>) -> [f64; 3] {
    [0, 1, 2].map(|i| b[3 + vech_index(i, i, 3)])
}
