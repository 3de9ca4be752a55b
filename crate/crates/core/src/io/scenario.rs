//! Scenario files: everything needed to set up and solve one planning problem.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::{wrap_angle, Belief, StateVector};
use crate::dynamics::BeliefModel;
use crate::error::{Error, Result};
use crate::motion::{MotionKind, MotionModel};
use crate::objectives::{BeliefCost, ConstraintSpec, CostWeights};
use crate::sensing::{CameraParams, FeatureMap, StereoCamera, VisibilityMode, DEFAULT_P_MIN};
use crate::solver::{SolverProblem, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Constrained,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub kind: MotionKind,
    pub dt: f64,
    /// Standard deviation of the noise on each control input.
    pub noise_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub alpha_max_deg: f64,
    pub beta_max_deg: f64,
    pub pixel_noise_std: f64,
    pub p_min: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let cam = CameraParams::default();
        Self {
            focal_px: cam.focal_px,
            baseline_m: cam.baseline_m,
            alpha_max_deg: cam.alpha_max.to_degrees(),
            beta_max_deg: cam.beta_max.to_degrees(),
            pixel_noise_std: cam.pixel_noise_std,
            p_min: DEFAULT_P_MIN,
        }
    }
}

impl CameraConfig {
    pub fn params(&self) -> Result<CameraParams> {
        let cam = CameraParams {
            focal_px: self.focal_px,
            baseline_m: self.baseline_m,
            alpha_max: self.alpha_max_deg.to_radians(),
            beta_max: self.beta_max_deg.to_radians(),
            pixel_noise_std: self.pixel_noise_std,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Start belief. Heading in radians; give either a diagonal or a full covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub mean: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_diag: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<[[f64; 3]; 3]>,
}

impl StartConfig {
    pub fn belief(&self) -> Result<Belief> {
        let cov = match (&self.cov_diag, &self.cov) {
            (Some(d), None) => DMatrix::from_diagonal(&DVector::from_row_slice(d)),
            (None, Some(full)) => DMatrix::from_fn(3, 3, |i, j| full[i][j]),
            _ => return Err(Error::config("start", "give exactly one of `cov_diag` and `cov`")),
        };
        let eig = nalgebra::SymmetricEigen::new(cov.clone()).eigenvalues;
        if eig.min() < 0.0 {
            return Err(Error::config("start.cov", "covariance must be positive semi-definite"));
        }
        Belief::new(DVector::from_row_slice(&self.mean), &cov).map_err(|e| Error::config("start.cov", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub terminal: [f64; 3],
    #[serde(default)]
    pub information: [f64; 3],
    pub control: Vec<f64>,
    #[serde(default)]
    pub collision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// 3-sigma bounds on `x` (m), `y` (m) and heading (rad).
    pub three_sigma: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialControls {
    StraightLine,
    Explicit { controls: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Map file, relative to the scenario file.
    pub map: PathBuf,
    pub horizon: usize,
    pub mode: SolverMode,
    pub visibility: VisibilityMode,
    pub motion: MotionConfig,
    #[serde(default)]
    pub camera: CameraConfig,
    pub start: StartConfig,
    /// Goal state, heading in radians.
    pub goal: [f64; 3],
    pub weights: WeightsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintConfig>,
    #[serde(default)]
    pub solver: SolverSettings,
    pub initial_controls: InitialControls,
}

/// A scenario turned into solver inputs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: SolverProblem<BeliefModel, BeliefCost>,
    pub settings: SolverSettings,
    pub start: Belief,
    pub goal: StateVector,
    /// The scenario's bounds, used for execution statistics even in unconstrained mode.
    pub bounds: Option<ConstraintSpec>,
}

impl Setup {
    pub fn model(&self) -> &BeliefModel {
        &self.problem.dynamics
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&super::read_text(path)?, &path.display().to_string())?;
        if cfg.map.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.map = dir.join(&cfg.map);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            path: self.name.clone(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::config("horizon", "must be at least 2"));
        }
        let m = self.motion.kind.input_dim();
        if self.motion.noise_std.len() != m {
            return Err(Error::config(
                "motion.noise_std",
                format!("expected {m} entries, got {}", self.motion.noise_std.len()),
            ));
        }
        if self.mode == SolverMode::Constrained {
            match &self.constraints {
                Some(c) if c.three_sigma.iter().all(|s| *s > 0.0 && s.is_finite()) => {}
                Some(_) => return Err(Error::config("constraints.three_sigma", "bounds must be positive")),
                None => return Err(Error::config("constraints", "required in constrained mode")),
            }
        }
        if let InitialControls::Explicit { controls } = &self.initial_controls {
            if controls.len() != self.horizon {
                return Err(Error::config(
                    "initial_controls.controls",
                    format!("expected {} controls, got {}", self.horizon, controls.len()),
                ));
            }
            if let Some(i) = controls.iter().position(|u| u.len() != m) {
                return Err(Error::config(
                    format!("initial_controls.controls[{i}]"),
                    format!("expected {m} entries"),
                ));
            }
        }
        self.solver.validate()
    }

    pub fn weights(&self) -> CostWeights {
        CostWeights {
            terminal: self.weights.terminal.to_vec(),
            // covariance bounds replace the information cost in constrained mode
            information: match self.mode {
                SolverMode::Constrained => vec![0.0; 3],
                SolverMode::Unconstrained => self.weights.information.to_vec(),
            },
            control: self.weights.control.clone(),
            collision: self.weights.collision,
            goal: StateVector::new(self.goal[0], self.goal[1], self.goal[2]),
        }
    }

    pub fn bounds(&self) -> Result<Option<ConstraintSpec>> {
        self.constraints
            .as_ref()
            .map(|c| ConstraintSpec::from_three_sigma(c.three_sigma))
            .transpose()
    }

    pub fn controls(&self) -> Vec<DVector<f64>> {
        match &self.initial_controls {
            InitialControls::Explicit { controls } => controls.iter().map(|u| DVector::from_row_slice(u)).collect(),
            InitialControls::StraightLine => straight_line_controls(
                self.motion.kind,
                self.motion.dt,
                self.horizon,
                &StateVector::new(self.start.mean[0], self.start.mean[1], self.start.mean[2]),
                &StateVector::new(self.goal[0], self.goal[1], self.goal[2]),
            ),
        }
    }

    pub fn build(&self, map: FeatureMap) -> Result<Setup> {
        self.validate()?;
        let motion = MotionModel::with_noise_std(self.motion.kind, self.motion.dt, &self.motion.noise_std)?;
        let mut sensor = StereoCamera::new(map.clone(), self.camera.params()?, self.visibility);
        sensor.p_min = self.camera.p_min;
        let model = BeliefModel::new(motion, sensor)?;
        let weights = self.weights();
        weights.validate(self.motion.kind.input_dim())?;
        let bounds = self.bounds()?;
        let constraints = match self.mode {
            SolverMode::Constrained => bounds.clone().expect("validated"),
            SolverMode::Unconstrained => ConstraintSpec::none(model.belief_dim()),
        };
        let start = self.start.belief()?;
        let cost = BeliefCost {
            weights,
            constraints,
            obstacles: map.obstacles().to_vec(),
        };
        let problem = SolverProblem::new(model, cost, start.to_vector(), self.controls())?;
        Ok(Setup {
            problem,
            settings: self.solver.clone(),
            start,
            goal: StateVector::new(self.goal[0], self.goal[1], self.goal[2]),
            bounds,
        })
    }
}

/// Constant controls that move the start towards the goal in `horizon` steps.
/// The unicycle drives along its initial heading at the speed that covers
/// the straight-line distance, without turning.
pub fn straight_line_controls(
    kind: MotionKind,
    dt: f64,
    horizon: usize,
    start: &StateVector,
    goal: &StateVector,
) -> Vec<DVector<f64>> {
    let t = dt * horizon as f64;
    let (dx, dy) = (goal.x - start.x, goal.y - start.y);
    let u = match kind {
        MotionKind::Holonomic => vec![dx / t, dy / t, wrap_angle(goal.theta - start.theta) / t],
        MotionKind::Unicycle => vec![dx.hypot(dy) / t, 0.0],
    };
    vec![DVector::from_vec(u); horizon]
}

/// SHA-256 over the start belief and control sequence, as hex.
pub fn trajectory_hash(b0: &DVector<f64>, controls: &[DVector<f64>]) -> String {
    let mut h = Sha256::new();
    for v in std::iter::once(b0).chain(controls) {
        h.update((v.len() as u64).to_le_bytes());
        for x in v.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
