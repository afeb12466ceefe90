//! Planning problem data, per-family constraint residuals, the cost function
//! and the assembled nonlinear program.
//!
//! Round 0 of every plan is the fixed initial stance; rounds `1..=M` are
//! decision variables. A leg whose normal force is zero in round `j` is the
//! leg swinging into its round-`j` toe position.

mod nlp;
mod residuals;

pub use nlp::{ConstraintFamily, ConstraintInfo, DerivativeErrors, Layout, NlpConfig, NlpInstance, FRICTION_FACETS};
pub use residuals::*;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::kinematics::RobotModel;
use crate::scene::Scene;
use crate::{lit, Real};

/// One planning round. Forces are world-frame vectors, indexed
/// `[leg][candidate]` in the order of the scene's candidate map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState<T: Real> {
    pub com: Vector3<T>,
    pub body_euler: Vector3<T>,
    pub toes: Vec<Vector3<T>>,
    pub forces: Vec<Vec<Vector3<T>>>,
    /// Present only when planning with exact kinematics.
    pub joint_angles: Option<Vec<Vec<T>>>,
    /// Point contacts carry no torque; always zero.
    pub contact_torques: Vec<Vector3<T>>,
}

impl<T: Real> RoundState<T> {
    /// A round with all forces zero.
    pub fn unloaded(com: Vector3<T>, body_euler: Vector3<T>, toes: Vec<Vector3<T>>, scene: &Scene<T>) -> Self {
        let forces = scene.candidate_map.iter().map(|c| vec![Vector3::zeros(); c.len()]).collect();
        let n = toes.len();
        Self { com, body_euler, toes, forces, joint_angles: None, contact_torques: vec![Vector3::zeros(); n] }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.com, self.body_euler)
    }

    /// Sum of the candidate forces acting on one leg.
    pub fn leg_force(&self, leg: usize) -> Vector3<T> {
        self.forces[leg].iter().fold(Vector3::zeros(), |a, f| a + f)
    }

    pub fn validate(&self, n_legs: usize, scene: &Scene<T>) -> Result<()> {
        if self.toes.len() != n_legs || self.forces.len() != n_legs {
            return Err(Error::InvalidProblem(format!("round state must describe {n_legs} legs")));
        }
        for (leg, (f, c)) in self.forces.iter().zip(&scene.candidate_map).enumerate() {
            if f.len() != c.len() {
                return Err(Error::InvalidProblem(format!("leg {leg}: one force per candidate surface required")));
            }
        }
        if self.contact_torques.iter().any(|t| t.norm() != T::zero()) {
            return Err(Error::InvalidProblem("contact torques must be zero for point contacts".into()));
        }
        let finite = |v: &Vector3<T>| v.iter().all(|x| x.is_finite());
        if !finite(&self.com) || !finite(&self.body_euler) || !self.toes.iter().all(finite) {
            return Err(Error::InvalidProblem("round state has non-finite pose or toe".into()));
        }
        if !self.forces.iter().flatten().all(finite) {
            return Err(Error::InvalidProblem("round state has non-finite force".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinematicsMode {
    /// Workspace sphere around each hip plus the conservative force bound.
    Sphere,
    /// Joint angles as variables, forward-kinematics equalities and the
    /// per-joint torque limit.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceCost {
    /// Smoothed `‖f‖₁`, favouring few loaded legs.
    L1,
    /// `‖f‖²`, spreading load evenly.
    L2,
}

/// Smoothing width of the L1 force cost (N).
pub const L1_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights<T: Real> {
    pub q_p: Matrix3<T>,
    pub q_c: Matrix3<T>,
    pub q_theta: Matrix3<T>,
    pub q_delta: Matrix3<T>,
    /// Weight of the terminal body-pose term (only with a body target).
    pub q_body: Matrix3<T>,
    pub w_force: T,
    pub force_cost: ForceCost,
}

impl<T: Real> Default for CostWeights<T> {
    fn default() -> Self {
        Self {
            q_p: Matrix3::identity(),
            q_c: Matrix3::identity(),
            q_theta: Matrix3::identity(),
            q_delta: Matrix3::identity(),
            q_body: Matrix3::identity(),
            w_force: lit(0.01),
            force_cost: ForceCost::L1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets<T: Real> {
    pub toes: Vec<Vector3<T>>,
    pub body: Option<Pose<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem<T: Real> {
    pub robot: RobotModel<T>,
    pub scene: Scene<T>,
    pub rounds: usize,
    pub s_mu: T,
    pub s_tau: T,
    pub weights: CostWeights<T>,
    pub targets: Targets<T>,
    pub initial_stance: RoundState<T>,
    pub switchability: bool,
    pub kinematics_mode: KinematicsMode,
    /// Every toe must end within this distance of its target (m).
    pub terminal_tolerance: T,
}

impl<T: Real> PlanProblem<T> {
    pub fn n_legs(&self) -> usize {
        self.robot.legs.len()
    }

    /// Force scale `m‖g‖` (N).
    pub fn force_scale(&self) -> T {
        self.robot.mass * self.scene.gravity.norm()
    }

    /// Length scale, the workspace sphere radius (m).
    pub fn length_scale(&self) -> T {
        self.robot.reach_radius
    }

    /// Conservative per-component force bound (N).
    pub fn force_bound(&self) -> T {
        self.robot.force_bound(self.s_tau)
    }

    /// Friction coefficient after the safety factor.
    pub fn effective_friction(&self, surface: usize) -> T {
        self.scene.surfaces[surface].friction / self.s_mu
    }

    /// Checks all invariants; returns warnings for soft violations.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.robot.validate()?;
        let n = self.n_legs();
        self.scene.validate(n)?;
        if self.rounds < 1 {
            return Err(Error::InvalidProblem("rounds must be at least 1".into()));
        }
        if !(self.s_mu > T::zero()) || !(self.s_tau > T::zero()) {
            return Err(Error::InvalidProblem("safety factors must be positive".into()));
        }
        if self.targets.toes.len() != n {
            return Err(Error::InvalidProblem(format!("targets must list {n} toe positions")));
        }
        if !(self.terminal_tolerance > T::zero()) {
            return Err(Error::InvalidProblem("terminal_tolerance must be positive".into()));
        }
        for (name, m) in [
            ("q_p", &self.weights.q_p),
            ("q_c", &self.weights.q_c),
            ("q_theta", &self.weights.q_theta),
            ("q_delta", &self.weights.q_delta),
            ("q_body", &self.weights.q_body),
        ] {
            if !is_psd(m) {
                return Err(Error::InvalidProblem(format!("weight matrix {name} must be symmetric positive semidefinite")));
            }
        }
        if self.weights.w_force < T::zero() {
            return Err(Error::InvalidProblem("w_force must be nonnegative".into()));
        }
        self.initial_stance.validate(n, &self.scene)?;
        if self.kinematics_mode == KinematicsMode::Exact {
            let angles = self
                .initial_stance
                .joint_angles
                .as_ref()
                .ok_or(Error::InvalidProblem("exact kinematics needs initial joint angles".into()))?;
            if angles.len() != n || angles.iter().zip(&self.robot.legs).any(|(a, l)| a.len() != l.dof()) {
                return Err(Error::InvalidProblem("initial joint angles do not match the legs".into()));
            }
        }
        let mut warnings = Vec::new();
        if self.s_mu < T::one() {
            warnings.push("s_mu < 1 enlarges the friction cone beyond the nominal coefficient".to_string());
        }
        if self.s_tau < T::one() {
            warnings.push("s_tau < 1 allows torques beyond the motor limit".to_string());
        }
        Ok(warnings)
    }
}

fn is_psd<T: Real>(m: &Matrix3<T>) -> bool {
    let tol = lit::<T>(1e-12) * (T::one() + m.abs().max());
    if (m - m.transpose()).abs().max() > tol {
        return false;
    }
    m.symmetric_eigenvalues().iter().all(|&e| e >= -tol)
}

/// Per-family maximum violation in normalized units (forces over `m‖g‖`,
/// lengths over the reach radius).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub equilibrium_force: f64,
    pub equilibrium_moment: f64,
    pub reachability: f64,
    pub step_size: f64,
    pub friction_cone: f64,
    pub force_bound: f64,
    pub complementarity: f64,
    pub switchability: f64,
    pub region: f64,
    pub stance_hold: f64,
    pub keep_out: f64,
    pub terminal: f64,
}

impl ResidualReport {
    pub fn families(&self) -> [(&'static str, f64); 12] {
        [
            ("equilibrium_force", self.equilibrium_force),
            ("equilibrium_moment", self.equilibrium_moment),
            ("reachability", self.reachability),
            ("step_size", self.step_size),
            ("friction_cone", self.friction_cone),
            ("force_bound", self.force_bound),
            ("complementarity", self.complementarity),
            ("switchability", self.switchability),
            ("region", self.region),
            ("stance_hold", self.stance_hold),
            ("keep_out", self.keep_out),
            ("terminal", self.terminal),
        ]
    }

    pub fn max(&self) -> f64 {
        self.families().iter().fold(0.0, |a, (_, v)| a.max(*v))
    }

    /// Name of the family with the largest violation.
    pub fn worst(&self) -> (&'static str, f64) {
        self.families()
            .into_iter()
            .fold(("equilibrium_force", f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}
