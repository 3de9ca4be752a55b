//! plan / execute / montecarlo / ablation / sweep.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::map::load_map;
use super::output::{num, read_json, write_json, PlanDoc, PolicyDoc, Table};
use super::scenario::{trajectory_hash, ScenarioConfig, Setup, SolverMode};
use crate::belief::{Belief, StateVector};
use crate::dynamics::ObservationModel;
use crate::error::{Error, Result};
use crate::objectives::ConstraintSpec;
use crate::sensing::VisibilityMode;
use crate::sim::{execute_once, monte_carlo, ExecutionOptions, ExecutionTrace, MonteCarloSummary};
use crate::solver::{outer_solve, Policy, SolveReport};

/// Bound regimes as 3-sigma values `[x (m), y (m), heading (rad)]`.
pub const REGIMES: [(&str, [f64; 3]); 3] = [
    ("loose", [0.36, 0.36, 0.25]),
    ("medium", [0.25, 0.25, 0.2]),
    ("tight", [0.15, 0.15, 0.15]),
];

/// Inputs shared by every command.
#[derive(Debug, Clone)]
pub struct CommandArgs {
    pub scenario: PathBuf,
    pub map: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Option<SolverMode>,
    pub visibility: Option<VisibilityMode>,
}

/// Result of a command, mapped to the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Feasible,
    Infeasible,
    Done,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Feasible | Outcome::Done => 0,
            Outcome::Infeasible => 2,
        }
    }

    fn of(report: &SolveReport) -> Self {
        if report.feasible {
            Outcome::Feasible
        } else {
            Outcome::Infeasible
        }
    }
}

/// Loads the scenario and applies command-line overrides.
pub fn load_config(args: &CommandArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.scenario)?;
    if let Some(map) = &args.map {
        cfg.map = map.clone();
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(vis) = args.visibility {
        cfg.visibility = vis;
    }
    Ok(cfg)
}

pub fn setup(cfg: &ScenarioConfig) -> Result<Setup> {
    cfg.build(load_map(&cfg.map)?)
}

/// A finished solve with everything needed to write it out.
#[derive(Debug, Clone)]
pub struct Plan {
    pub setup: Setup,
    pub policy: Policy,
    pub report: SolveReport,
    pub initial_trajectory_hash: String,
}

pub fn solve(cfg: &ScenarioConfig) -> Result<Plan> {
    let setup = setup(cfg)?;
    let hash = trajectory_hash(&setup.problem.initial_belief, &setup.problem.initial_controls);
    let (policy, report) = outer_solve(&setup.problem, &setup.settings)?;
    Ok(Plan {
        setup,
        policy,
        report,
        initial_trajectory_hash: hash,
    })
}

fn mode_name(mode: SolverMode) -> &'static str {
    match mode {
        SolverMode::Constrained => "constrained",
        SolverMode::Unconstrained => "unconstrained",
    }
}

fn visibility_name(mode: VisibilityMode) -> &'static str {
    match mode {
        VisibilityMode::Smooth => "smooth",
        VisibilityMode::Hard => "hard",
    }
}

fn plan_doc(cfg: &ScenarioConfig, plan: &Plan) -> PlanDoc {
    PlanDoc {
        scenario: cfg.name.clone(),
        mode: mode_name(cfg.mode).into(),
        visibility: visibility_name(cfg.visibility).into(),
        initial_trajectory_hash: plan.initial_trajectory_hash.clone(),
        three_sigma_bounds: match (cfg.mode, &cfg.constraints) {
            (SolverMode::Constrained, Some(c)) => c.three_sigma.to_vec(),
            _ => Vec::new(),
        },
        report: plan.report.clone(),
    }
}

const AXES: [&str; 3] = ["x", "y", "theta"];

/// One row per timestep: mean, covariance, 3-sigma, controls, constraint values.
pub fn plan_table(plan: &Plan) -> Result<Table> {
    let m = plan.policy.nominal_controls[0].len();
    let constraints = &plan.setup.problem.objective.constraints;
    let mut header: Vec<String> = vec!["k".into()];
    header.extend(AXES.map(String::from));
    header.extend(["var_x", "var_y", "var_theta", "cov_xy", "cov_xtheta", "cov_ytheta"].map(String::from));
    header.extend(AXES.map(|a| format!("three_sigma_{a}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend((0..constraints.len()).map(|j| format!("psi_{}", AXES[j])));
    header.push("active_features".into());
    let mut table = Table::new(header);
    let sensor = &plan.setup.model().sensor;
    for (k, bv) in plan.policy.nominal_beliefs.iter().enumerate() {
        let b = Belief::from_vector(bv)?;
        let cov = b.covariance();
        let mut row = vec![k.to_string()];
        row.extend(b.mean.iter().map(|x| num(*x)));
        row.extend([cov[(0, 0)], cov[(1, 1)], cov[(2, 2)], cov[(1, 0)], cov[(2, 0)], cov[(2, 1)]].map(num));
        row.extend((0..3).map(|i| num(3.0 * cov[(i, i)].max(0.0).sqrt())));
        match plan.policy.nominal_controls.get(k) {
            Some(u) => row.extend(u.iter().map(|x| num(*x))),
            None => row.extend((0..m).map(|_| String::new())),
        }
        let psi = &constraints.selector * bv - &constraints.bounds;
        row.extend(psi.iter().map(|x| num(*x)));
        row.push(sensor.active_set(&b.mean).len().to_string());
        table.push(row);
    }
    Ok(table)
}

fn write_plan(dir: &Path, prefix: &str, cfg: &ScenarioConfig, plan: &Plan) -> Result<()> {
    write_json(
        &dir.join(format!("{prefix}policy.json")),
        &PolicyDoc::new(&plan.policy, plan.initial_trajectory_hash.clone()),
    )?;
    write_json(&dir.join(format!("{prefix}report.json")), &plan_doc(cfg, plan))?;
    plan_table(plan)?.write(&dir.join(format!("{prefix}plan.csv")))
}

pub fn run_plan(args: &CommandArgs) -> Result<Outcome> {
    let cfg = load_config(args)?;
    let plan = solve(&cfg)?;
    write_plan(&args.out, "", &cfg, &plan)?;
    Ok(Outcome::of(&plan.report))
}

/// Loads a policy file and checks it against the scenario.
pub fn load_policy(path: &Path, setup: &Setup) -> Result<Policy> {
    let doc: PolicyDoc = read_json(path)?;
    let policy = doc.policy()?;
    let problem = &setup.problem;
    let origin = path.display().to_string();
    if policy.horizon() != problem.horizon() {
        return Err(Error::config(
            origin,
            format!("policy horizon {} does not match scenario horizon {}", policy.horizon(), problem.horizon()),
        ));
    }
    if doc.belief_dim != setup.model().belief_dim() || doc.control_dim != setup.model().control_dim() {
        return Err(Error::config(origin, "policy dimensions do not match the scenario's motion model"));
    }
    if policy.nominal_beliefs[0] != problem.initial_belief {
        return Err(Error::config(origin, "policy start belief differs from the scenario start"));
    }
    Ok(policy)
}

fn policy_path(args: &CommandArgs, policy: Option<&Path>) -> PathBuf {
    policy.map_or_else(|| args.out.join("policy.json"), Path::to_path_buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    pub scenario: String,
    pub seed: u64,
    pub diverged: bool,
    pub true_states: Vec<[f64; 3]>,
    pub estimated_means: Vec<[f64; 3]>,
    pub estimated_covariances: Vec<Vec<f64>>,
    pub applied_controls: Vec<Vec<f64>>,
    pub estimation_errors: Vec<[f64; 3]>,
    pub planned_3sigma: Vec<[f64; 3]>,
    pub realized_3sigma: Vec<[f64; 3]>,
    pub detected: Vec<Vec<usize>>,
}

impl TraceDoc {
    fn new(scenario: &str, t: &ExecutionTrace) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed: t.seed,
            diverged: t.diverged,
            true_states: t.true_states.iter().map(|s| [s.x, s.y, s.theta]).collect(),
            estimated_means: t.estimated_beliefs.iter().map(|b| [b.mean[0], b.mean[1], b.mean[2]]).collect(),
            estimated_covariances: t.estimated_beliefs.iter().map(|b| b.cov_vech.iter().copied().collect()).collect(),
            applied_controls: t.applied_controls.iter().map(|u| u.iter().copied().collect()).collect(),
            estimation_errors: t.estimation_errors.clone(),
            planned_3sigma: t.planned_3sigma.clone(),
            realized_3sigma: t.realized_3sigma.clone(),
            detected: t.detected.clone(),
        }
    }
}

/// Estimation error against planned and realized 3-sigma, one row per timestep.
pub fn trace_table(t: &ExecutionTrace) -> Table {
    let m = t.applied_controls.first().map_or(0, |u| u.len());
    let mut header: Vec<String> = vec!["k".into()];
    for group in ["true", "est", "err", "planned_3s", "realized_3s"] {
        header.extend(AXES.map(|a| format!("{group}_{a}")));
    }
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("detected".into());
    let mut table = Table::new(header);
    for k in 0..t.true_states.len() {
        let s = t.true_states[k];
        let b = &t.estimated_beliefs[k];
        let mut row = vec![k.to_string()];
        row.extend([s.x, s.y, s.theta].map(num));
        row.extend((0..3).map(|i| num(b.mean[i])));
        row.extend(t.estimation_errors[k].map(num));
        row.extend(t.planned_3sigma[k].map(num));
        row.extend(t.realized_3sigma[k].map(num));
        match t.applied_controls.get(k) {
            Some(u) => row.extend(u.iter().map(|x| num(*x))),
            None => row.extend((0..m).map(|_| String::new())),
        }
        row.push(t.detected.get(k).map_or(String::new(), |d| d.len().to_string()));
        table.push(row);
    }
    table
}

pub fn run_execute(args: &CommandArgs, policy: Option<&Path>, seed: u64) -> Result<Outcome> {
    let cfg = load_config(args)?;
    let setup = setup(&cfg)?;
    let policy = load_policy(&policy_path(args, policy), &setup)?;
    let trace = execute_once(setup.model(), &policy, &setup.start, seed, ExecutionOptions::default())?;
    write_json(&args.out.join("trace.json"), &TraceDoc::new(&cfg.name, &trace))?;
    trace_table(&trace).write(&args.out.join("trace.csv"))?;
    Ok(Outcome::Done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDoc {
    pub scenario: String,
    pub seed: u64,
    /// Bounds the violation counts refer to, as 3-sigma values.
    pub three_sigma_bounds: Vec<f64>,
    pub summary: MonteCarloSummary,
}

/// Scenario bounds used for counting; falls back to no bounds.
fn counting_bounds(cfg: &ScenarioConfig, setup: &Setup) -> (ConstraintSpec, Vec<f64>) {
    match (&setup.bounds, &cfg.constraints) {
        (Some(spec), Some(c)) => (spec.clone(), c.three_sigma.to_vec()),
        _ => (ConstraintSpec::none(setup.model().belief_dim()), Vec::new()),
    }
}

pub fn run_monte_carlo(args: &CommandArgs, policy: Option<&Path>, runs: usize, seed: u64) -> Result<Outcome> {
    if runs == 0 {
        return Err(Error::Usage("--runs must be at least 1".into()));
    }
    let cfg = load_config(args)?;
    let setup = setup(&cfg)?;
    let policy = load_policy(&policy_path(args, policy), &setup)?;
    let (bounds, three_sigma) = counting_bounds(&cfg, &setup);
    let (summary, traces) = monte_carlo(
        setup.model(),
        &policy,
        &setup.start,
        &bounds,
        &setup.goal,
        runs,
        seed,
        ExecutionOptions::default(),
    )?;
    let doc = MonteCarloDoc {
        scenario: cfg.name.clone(),
        seed,
        three_sigma_bounds: three_sigma,
        summary,
    };
    write_json(&args.out.join("montecarlo.json"), &doc)?;
    runs_table(&traces, &bounds, &setup.goal).write(&args.out.join("montecarlo.csv"))?;
    Ok(Outcome::Done)
}

fn runs_table(traces: &[ExecutionTrace], bounds: &ConstraintSpec, goal: &StateVector) -> Table {
    let mut header: Vec<String> = ["seed", "diverged", "steps", "final_goal_error"].map(String::from).to_vec();
    header.extend((0..bounds.len()).map(|j| format!("violations_{}", AXES[j])));
    let mut table = Table::new(header);
    for t in traces {
        let last = t.true_states.last().expect("trace has a start state");
        let mut row = vec![
            t.seed.to_string(),
            t.diverged.to_string(),
            t.steps().to_string(),
            num((last.x - goal.x).hypot(last.y - goal.y)),
        ];
        let mut counts = vec![0usize; bounds.len()];
        for b in &t.estimated_beliefs {
            let psi = &bounds.selector * b.to_vector() - &bounds.bounds;
            for (c, p) in psi.iter().enumerate() {
                counts[c] += (*p > 0.0) as usize;
            }
        }
        row.extend(counts.iter().map(|c| c.to_string()));
        table.push(row);
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDoc {
    pub scenario: String,
    pub initial_trajectory_hash: String,
    pub smooth_cost: f64,
    pub hard_cost: f64,
    pub smooth: PlanDoc,
    pub hard: PlanDoc,
}

/// Solves with smooth and with hard visibility; both start from the same trajectory.
pub fn ablation(cfg: &ScenarioConfig) -> Result<(AblationDoc, Plan, Plan)> {
    let configs: Vec<ScenarioConfig> = [VisibilityMode::Smooth, VisibilityMode::Hard]
        .into_iter()
        .map(|v| ScenarioConfig {
            visibility: v,
            ..cfg.clone()
        })
        .collect();
    let mut plans = configs.par_iter().map(solve).collect::<Result<Vec<_>>>()?;
    let hard = plans.pop().expect("two plans");
    let smooth = plans.pop().expect("two plans");
    if smooth.initial_trajectory_hash != hard.initial_trajectory_hash {
        return Err(Error::config("initial_controls", "ablation runs must share the initial trajectory"));
    }
    let doc = AblationDoc {
        scenario: cfg.name.clone(),
        initial_trajectory_hash: smooth.initial_trajectory_hash.clone(),
        smooth_cost: smooth.report.final_cost,
        hard_cost: hard.report.final_cost,
        smooth: plan_doc(&configs[0], &smooth),
        hard: plan_doc(&configs[1], &hard),
    };
    Ok((doc, smooth, hard))
}

pub fn run_ablation(args: &CommandArgs) -> Result<Outcome> {
    let cfg = load_config(args)?;
    let (doc, smooth, hard) = ablation(&cfg)?;
    write_plan(&args.out, "smooth_", &ScenarioConfig { visibility: VisibilityMode::Smooth, ..cfg.clone() }, &smooth)?;
    write_plan(&args.out, "hard_", &ScenarioConfig { visibility: VisibilityMode::Hard, ..cfg.clone() }, &hard)?;
    write_json(&args.out.join("ablation.json"), &doc)?;
    Ok(if smooth.report.feasible && hard.report.feasible {
        Outcome::Feasible
    } else {
        Outcome::Infeasible
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub regime: String,
    pub three_sigma: [f64; 3],
    pub final_cost: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDoc {
    pub scenario: String,
    pub regimes: Vec<SweepEntry>,
}

/// Constrained solves under the loose, medium and tight bound regimes.
pub fn sweep(cfg: &ScenarioConfig) -> Result<Vec<(ScenarioConfig, Plan)>> {
    REGIMES
        .par_iter()
        .map(|(name, bounds)| {
            let mut c = cfg.clone();
            c.name = format!("{} ({name})", cfg.name);
            c.mode = SolverMode::Constrained;
            c.constraints = Some(super::scenario::ConstraintConfig { three_sigma: *bounds });
            let plan = solve(&c)?;
            Ok((c, plan))
        })
        .collect()
}

pub fn run_sweep(args: &CommandArgs) -> Result<Outcome> {
    let cfg = load_config(args)?;
    let plans = sweep(&cfg)?;
    let mut regimes = Vec::new();
    for ((name, bounds), (c, plan)) in REGIMES.iter().zip(&plans) {
        write_plan(&args.out, &format!("{name}_"), c, plan)?;
        regimes.push(SweepEntry {
            regime: name.to_string(),
            three_sigma: *bounds,
            final_cost: plan.report.final_cost,
            feasible: plan.report.feasible,
        });
    }
    let all_feasible = regimes.iter().all(|r| r.feasible);
    write_json(
        &args.out.join("sweep.json"),
        &SweepDoc {
            scenario: cfg.name.clone(),
            regimes,
        },
    )?;
    Ok(if all_feasible { Outcome::Feasible } else { Outcome::Infeasible })
}
