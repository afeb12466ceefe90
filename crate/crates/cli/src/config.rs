//! Scenario configuration files. Lengths are millimetres; everything else
//! is SI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use climbplan::formulation::{ForceCost, KinematicsMode, PlanProblem};
use climbplan::scene::ScenarioParams;
use climbplan::setup::{standard_problem, supported_round};
use climbplan::solver::SolverOptions;
use climbplan::trajectory::TrajectoryOptions;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::CliError;

const MM: f64 = 1e-3;

/// Scenario parameters measured in millimetres.
pub const LENGTH_PARAMS: [&str; 7] = [
    "wall_distance",
    "brick_height",
    "brick_length",
    "brick_depth",
    "incline_run",
    "tube_radius",
    "tube_height",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub torque_limit: Option<f64>,
    /// mm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reach_radius: Option<f64>,
    /// mm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_body_step: Option<[f64; 3]>,
    /// rad
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_body_rotation_step: Option<[f64; 3]>,
    /// mm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_toe_step: Option<f64>,
    /// N·m/rad
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_stiffness: Option<Vec<f64>>,
}

/// Diagonal cost weights; unset entries keep the scenario's values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_force: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_cost: Option<ForceCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// s
    pub round_duration: f64,
    /// mm
    pub swing_clearance: f64,
    pub samples_per_round: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        let d = TrajectoryOptions::default();
        Self {
            round_duration: d.round_duration,
            swing_clearance: d.swing_clearance / MM,
            samples_per_round: d.samples_per_round,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Stem of the output files; defaults to the scenario name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default = "default_s_mu")]
    pub s_mu: f64,
    #[serde(default = "default_s_tau")]
    pub s_tau: f64,
    #[serde(default = "default_true")]
    pub switchability: bool,
    #[serde(default = "default_kinematics")]
    pub kinematics: KinematicsMode,
    /// mm
    #[serde(default = "default_terminal_tolerance")]
    pub terminal_tolerance: f64,
    /// Scenario parameters; lengths in mm, angles in rad.
    #[serde(default)]
    pub scene: BTreeMap<String, f64>,
    #[serde(default)]
    pub robot: RobotConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    /// Toe targets (mm), one per leg.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_s_mu() -> f64 {
    1.1
}
fn default_s_tau() -> f64 {
    1.8
}
fn default_true() -> bool {
    true
}
fn default_kinematics() -> KinematicsMode {
    KinematicsMode::Sphere
}
fn default_terminal_tolerance() -> f64 {
    2.0
}

impl ScenarioConfig {
    /// Defaults for a bundled scenario.
    pub fn for_scenario(name: &str) -> Self {
        Self {
            scenario: name.to_string(),
            rounds: None,
            s_mu: default_s_mu(),
            s_tau: default_s_tau(),
            switchability: true,
            kinematics: default_kinematics(),
            terminal_tolerance: default_terminal_tolerance(),
            scene: BTreeMap::new(),
            robot: RobotConfig::default(),
            weights: WeightsConfig::default(),
            targets: None,
            solver: SolverOptions::default(),
            trajectory: TrajectoryConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(e.to_string()))
    }

    pub fn trajectory_options(&self) -> TrajectoryOptions {
        TrajectoryOptions {
            round_duration: self.trajectory.round_duration,
            swing_clearance: self.trajectory.swing_clearance * MM,
            samples_per_round: self.trajectory.samples_per_round,
            ..TrajectoryOptions::default()
        }
    }

    pub fn scenario_params(&self) -> Result<ScenarioParams<f64>, CliError> {
        let mut params = ScenarioParams::default();
        for (key, &value) in &self.scene {
            let v = if LENGTH_PARAMS.contains(&key.as_str()) { value * MM } else { value };
            params.set(key, v).map_err(|_| CliError::Config(format!("unknown scene key `scene.{key}`")))?;
        }
        Ok(params)
    }

    /// Sets one key from a `key=value` override. Only top-level scalar keys
    /// and `scene.<param>` are accepted.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = || CliError::Config(format!("invalid value `{value}` for `{key}`"));
        let num = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "scenario" => self.scenario = value.to_string(),
            "rounds" => self.rounds = Some(value.parse().map_err(|_| bad())?),
            "s_mu" => self.s_mu = num()?,
            "s_tau" => self.s_tau = num()?,
            "switchability" => self.switchability = parse_switch(value).ok_or_else(bad)?,
            "terminal_tolerance" => self.terminal_tolerance = num()?,
            "multistart" => self.solver.multistart_count = value.parse().map_err(|_| bad())?,
            "seed" => self.solver.rng_seed = value.parse().map_err(|_| bad())?,
            "tolerance" => self.solver.kkt_tolerance = num()?,
            k if k.starts_with("scene.") => {
                let param = &k["scene.".len()..];
                if !ScenarioParams::<f64>::KEYS.contains(&param) {
                    return Err(CliError::Config(format!("unknown scene key `{k}`")));
                }
                self.scene.insert(param.to_string(), num()?);
            }
            other => return Err(CliError::Config(format!("unknown override key `{other}`"))),
        }
        Ok(())
    }

    /// Builds and validates the planning problem.
    pub fn to_problem(&self) -> Result<PlanProblem<f64>, CliError> {
        let params = self.scenario_params()?;
        let mut p = standard_problem(&self.scenario, &params).map_err(|e| CliError::Config(format!("scenario: {e}")))?;
        if let Some(m) = self.rounds {
            p.rounds = m;
        }
        p.s_mu = self.s_mu;
        p.s_tau = self.s_tau;
        p.switchability = self.switchability;
        p.kinematics_mode = self.kinematics;
        p.terminal_tolerance = self.terminal_tolerance * MM;

        let r = &self.robot;
        if let Some(v) = r.mass {
            p.robot.mass = v;
        }
        if let Some(v) = r.torque_limit {
            p.robot.torque_limit = v;
        }
        if let Some(v) = r.reach_radius {
            p.robot.reach_radius = v * MM;
        }
        if let Some(v) = r.max_body_step {
            p.robot.max_body_step = Vector3::from(v) * MM;
        }
        if let Some(v) = r.max_body_rotation_step {
            p.robot.max_body_rotation_step = Vector3::from(v);
        }
        if let Some(v) = r.max_toe_step {
            p.robot.max_toe_step = v * MM;
        }
        if let Some(v) = &r.joint_stiffness {
            p.robot.joint_stiffness = v.clone();
        }

        let w = &self.weights;
        let diag = |v: f64| Matrix3::identity() * v;
        if let Some(v) = w.q_p {
            p.weights.q_p = diag(v);
        }
        if let Some(v) = w.q_c {
            p.weights.q_c = diag(v);
        }
        if let Some(v) = w.q_theta {
            p.weights.q_theta = diag(v);
        }
        if let Some(v) = w.q_delta {
            p.weights.q_delta = diag(v);
        }
        if let Some(v) = w.w_force {
            p.weights.w_force = v;
        }
        if let Some(v) = w.force_cost {
            p.weights.force_cost = v;
        }
        if let Some(t) = &self.targets {
            if t.len() != p.n_legs() {
                return Err(CliError::Config(format!("targets: expected {} toe targets, got {}", p.n_legs(), t.len())));
            }
            p.targets.toes = t.iter().map(|v| Vector3::from(*v) * MM).collect();
        }

        // The robot may have changed, so the initial support is recomputed.
        let s = &p.initial_stance;
        p.initial_stance = supported_round(&p.robot, &p.scene, s.com, s.body_euler, s.toes.clone())
            .map_err(|e| CliError::Config(format!("initial stance: {e}")))?;
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| CliError::Config(format!("solver: {e}")))?;
        self.trajectory_options().validate().map_err(|e| CliError::Config(format!("trajectory: {e}")))?;
        Ok(p)
    }

    pub fn output_name(&self) -> String {
        self.output.name.clone().unwrap_or_else(|| self.scenario.clone())
    }
}

pub fn parse_switch(value: &str) -> Option<bool> {
    match value {
        "on" | "true" => Some(true),
        "off" | "false" => Some(false),
        _ => None,
    }
}
