//! Leg kinematic chains: forward kinematics, analytic Jacobians, the offline
//! worst-case `‖Jᵀ‖∞` search and the virtual-joint leg stiffness.
//!
//! A chain starts at the hip (`hip_offset` in the body frame), turns by
//! `hip_yaw_mount` about the body z-axis, then applies each revolute joint in
//! turn. Every link extends along the local x-axis of the frame produced by
//! its joint, so the zero configuration is a straight leg along the mount
//! direction.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, yaw_rotation, Pose};
use crate::{lit, Real};

/// Largest leg-Jacobian condition number accepted by stiffness computations.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint<T: Real> {
    /// Rotation axis in the frame of the preceding link (unit norm).
    pub axis: Vector3<T>,
    pub link_length: T,
    pub min: T,
    pub max: T,
}

impl<T: Real> Joint<T> {
    pub fn new(axis: Vector3<T>, link_length: T, min: T, max: T) -> Self {
        Self { axis, link_length, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegChain<T: Real> {
    pub name: String,
    pub hip_offset: Vector3<T>,
    pub hip_yaw_mount: T,
    pub joints: Vec<Joint<T>>,
    /// Per-leg override of the workspace sphere radius.
    pub reach_radius: Option<T>,
    /// Per-leg override of the toe step limit.
    pub max_toe_step: Option<T>,
    /// Seed configuration for inverse kinematics.
    pub nominal_angles: Vec<T>,
}

/// Joint origins, world-aligned axes and toe position of a chain, all in the
/// body frame.
#[derive(Debug, Clone)]
pub struct ChainFrames<T: Real> {
    pub origins: Vec<Vector3<T>>,
    pub axes: Vec<Vector3<T>>,
    pub toe: Vector3<T>,
}

impl<T: Real> LegChain<T> {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn total_length(&self) -> T {
        self.joints.iter().fold(T::zero(), |acc, j| acc + j.link_length)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::InvalidModel(format!("leg `{}` has no joints", self.name)));
        }
        for (k, j) in self.joints.iter().enumerate() {
            if !(j.link_length > T::zero()) {
                return Err(Error::InvalidModel(format!(
                    "leg `{}` joint {k}: link length must be positive",
                    self.name
                )));
            }
            if !(j.min < j.max) {
                return Err(Error::InvalidModel(format!(
                    "leg `{}` joint {k}: joint_min must be below joint_max",
                    self.name
                )));
            }
            if (j.axis.norm() - T::one()).abs() > lit(1e-9) {
                return Err(Error::InvalidModel(format!(
                    "leg `{}` joint {k}: axis must have unit norm",
                    self.name
                )));
            }
        }
        if self.nominal_angles.len() != self.joints.len() {
            return Err(Error::InvalidModel(format!(
                "leg `{}`: nominal angle count does not match joint count",
                self.name
            )));
        }
        if let Some(r) = self.reach_radius {
            if !(r > T::zero()) {
                return Err(Error::InvalidModel(format!("leg `{}`: reach radius must be positive", self.name)));
            }
        }
        if let Some(r) = self.max_toe_step {
            if !(r > T::zero()) {
                return Err(Error::InvalidModel(format!("leg `{}`: max_toe_step must be positive", self.name)));
            }
        }
        Ok(())
    }

    pub fn within_limits(&self, theta: &[T]) -> bool {
        self.joints.iter().zip(theta).all(|(j, &t)| t >= j.min && t <= j.max)
    }

    pub fn clamp(&self, theta: &mut [T]) {
        for (j, t) in self.joints.iter().zip(theta.iter_mut()) {
            *t = t.max(j.min).min(j.max);
        }
    }

    pub fn frames(&self, theta: &[T]) -> ChainFrames<T> {
        assert_eq!(theta.len(), self.joints.len(), "joint angle count");
        let mut rot = yaw_rotation(self.hip_yaw_mount);
        let mut pos = self.hip_offset;
        let mut origins = Vec::with_capacity(self.joints.len());
        let mut axes = Vec::with_capacity(self.joints.len());
        for (joint, &angle) in self.joints.iter().zip(theta) {
            origins.push(pos);
            axes.push(rot * joint.axis);
            rot *= axis_angle(&joint.axis, angle);
            pos += rot * Vector3::new(joint.link_length, T::zero(), T::zero());
        }
        ChainFrames { origins, axes, toe: pos }
    }

    /// Toe position in the body frame.
    pub fn toe_in_body(&self, theta: &[T]) -> Vector3<T> {
        self.frames(theta).toe
    }
}

/// World-frame toe position for joint angles `theta` and body pose.
pub fn forward_kinematics<T: Real>(leg: &LegChain<T>, theta: &[T], body_pose: &Pose<T>) -> Vector3<T> {
    body_pose.transform_point(&leg.toe_in_body(theta))
}

/// Body-frame Jacobian `∂toe/∂θ` (3 × dof).
pub fn jacobian<T: Real>(leg: &LegChain<T>, theta: &[T]) -> Matrix3xX<T> {
    let f = leg.frames(theta);
    jacobian_from_frames(&f)
}

fn jacobian_from_frames<T: Real>(f: &ChainFrames<T>) -> Matrix3xX<T> {
    let mut j = Matrix3xX::zeros(f.axes.len());
    for k in 0..f.axes.len() {
        j.set_column(k, &f.axes[k].cross(&(f.toe - f.origins[k])));
    }
    j
}

/// `∂J/∂θ_m` for every joint `m`.
pub fn jacobian_derivatives<T: Real>(leg: &LegChain<T>, theta: &[T]) -> Vec<Matrix3xX<T>> {
    let f = leg.frames(theta);
    let n = f.axes.len();
    (0..n)
        .map(|m| {
            let mut d = Matrix3xX::zeros(n);
            let wm = f.axes[m];
            for k in 0..n {
                let wk = f.axes[k];
                let col = if m <= k {
                    let rk = f.toe - f.origins[k];
                    wm.cross(&wk).cross(&rk) + wk.cross(&wm.cross(&rk))
                } else {
                    wk.cross(&wm.cross(&(f.toe - f.origins[m])))
                };
                d.set_column(k, &col);
            }
            d
        })
        .collect()
}

/// Matrix ∞-norm of `Jᵀ`, i.e. the largest column 1-norm of `J`.
pub fn jt_infnorm<T: Real>(j: &Matrix3xX<T>) -> T {
    j.column_iter()
        .map(|c| c.iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |a, b| a.max(b))
}

/// Worst-case `‖J(θ)ᵀ‖∞` over the joint box, by a uniform grid search with
/// `grid_resolution` samples per joint followed by compass ascent from the
/// best grid points.
pub fn max_jacobian_infnorm<T: Real>(leg: &LegChain<T>, grid_resolution: usize) -> T {
    assert!(grid_resolution >= 2, "grid_resolution must be at least 2");
    let n = leg.dof();
    let value = |theta: &[T]| jt_infnorm(&jacobian(leg, theta));

    let steps: Vec<T> = leg
        .joints
        .iter()
        .map(|j| (j.max - j.min) / lit((grid_resolution - 1) as f64))
        .collect();
    let mut best: Vec<(T, Vec<T>)> = Vec::new();
    const KEEP: usize = 8;
    let total = grid_resolution.pow(n as u32);
    let mut theta = vec![T::zero(); n];
    for idx in 0..total {
        let mut rem = idx;
        for k in 0..n {
            let i = rem % grid_resolution;
            rem /= grid_resolution;
            theta[k] = if i == grid_resolution - 1 {
                leg.joints[k].max
            } else {
                leg.joints[k].min + steps[k] * lit(i as f64)
            };
        }
        let v = value(&theta);
        if best.len() < KEEP || v > best[best.len() - 1].0 {
            let pos = best.iter().position(|(b, _)| v > *b).unwrap_or(best.len());
            best.insert(pos, (v, theta.clone()));
            best.truncate(KEEP);
        }
    }

    let mut result = best[0].0;
    for (start_value, start) in best {
        let mut x = start;
        let mut fx = start_value;
        let mut step: Vec<T> = steps.iter().map(|s| *s * lit(0.5)).collect();
        let floor = lit::<T>(1e-12);
        while step.iter().any(|s| *s > floor) {
            let mut improved = false;
            for k in 0..n {
                for sign in [T::one(), -T::one()] {
                    let mut y = x.clone();
                    y[k] = (y[k] + sign * step[k]).max(leg.joints[k].min).min(leg.joints[k].max);
                    let fy = value(&y);
                    if fy > fx {
                        x = y;
                        fx = fy;
                        improved = true;
                    }
                }
            }
            if !improved {
                for s in step.iter_mut() {
                    *s *= lit(0.5);
                }
            }
        }
        result = result.max(fx);
    }
    result
}

fn condition_number<T: Real>(j: &Matrix3xX<T>) -> T {
    if j.ncols() < 3 {
        return T::max_value().unwrap_or_else(|| lit(f64::MAX));
    }
    let sv = j.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(T::zero(), |a, &b| a.max(b));
    let smin = sv.iter().fold(smax, |a, &b| a.min(b));
    if smin <= T::zero() {
        T::max_value().unwrap_or_else(|| lit(f64::MAX))
    } else {
        smax / smin
    }
}

/// Cartesian leg stiffness `K = (J k⁻¹ Jᵀ)⁻¹` of position-controlled joints
/// modelled as torsional springs with stiffness `joint_stiffness`.
pub fn vjm_leg_stiffness<T: Real>(leg: &LegChain<T>, theta: &[T], joint_stiffness: &[T]) -> Result<Matrix3<T>> {
    let j = jacobian(leg, theta);
    vjm_stiffness_from_jacobian(&j, joint_stiffness)
}

pub fn vjm_stiffness_from_jacobian<T: Real>(j: &Matrix3xX<T>, joint_stiffness: &[T]) -> Result<Matrix3<T>> {
    assert_eq!(j.ncols(), joint_stiffness.len(), "stiffness count");
    let cond = condition_number(j);
    if !(cond < lit(MAX_CONDITION)) {
        return Err(Error::SingularConfiguration { condition: cond.to_f64().unwrap_or(f64::INFINITY) });
    }
    let mut compliance = Matrix3::zeros();
    for (k, &stiff) in joint_stiffness.iter().enumerate() {
        let c = j.column(k);
        compliance += c * c.transpose() / stiff;
    }
    let k = compliance
        .try_inverse()
        .ok_or(Error::SingularConfiguration { condition: cond.to_f64().unwrap_or(f64::INFINITY) })?;
    Ok((k + k.transpose()) * lit::<T>(0.5))
}

/// Damped least-squares inverse kinematics for a body-frame toe target.
pub fn inverse_kinematics<T: Real>(leg: &LegChain<T>, toe_body: &Vector3<T>, seed: Option<&[T]>) -> Result<Vec<T>> {
    let n = leg.dof();
    let mut seeds: Vec<Vec<T>> = Vec::new();
    if let Some(s) = seed {
        seeds.push(s.to_vec());
    }
    seeds.push(leg.nominal_angles.clone());
    seeds.push(leg.joints.iter().map(|j| (j.min + j.max) * lit(0.5)).collect());
    seeds.push(vec![T::zero(); n]);

    let tol = lit::<T>(1e-12);
    let mut best: Option<(T, Vec<T>)> = None;
    for mut theta in seeds {
        leg.clamp(&mut theta);
        let mut damping = lit::<T>(1e-3);
        let mut err = (toe_body - leg.toe_in_body(&theta)).norm();
        for _ in 0..500 {
            if err < tol {
                break;
            }
            let e = toe_body - leg.toe_in_body(&theta);
            let j = jacobian(leg, &theta);
            let jd = DMatrix::from_iterator(3, n, j.iter().copied());
            let a = &jd * jd.transpose() + DMatrix::identity(3, 3) * (damping * damping);
            let Some(inv) = a.try_inverse() else { break };
            let ed = nalgebra::DVector::from_iterator(3, e.iter().copied());
            let step = jd.transpose() * (inv * ed);
            let mut trial = theta.clone();
            for k in 0..n {
                trial[k] += step[k];
            }
            leg.clamp(&mut trial);
            let trial_err = (toe_body - leg.toe_in_body(&trial)).norm();
            if trial_err < err {
                theta = trial;
                err = trial_err;
                damping = (damping * lit(0.3)).max(lit(1e-9));
            } else {
                damping *= lit(10.0);
                if damping > lit(1e3) {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, theta));
        }
        if err < lit(1e-10) {
            break;
        }
    }
    let (err, theta) = best.expect("at least one seed");
    if err < lit(1e-9) {
        Ok(theta)
    } else {
        Err(Error::InverseKinematics { leg: leg.name.clone(), residual: err.to_f64().unwrap_or(f64::NAN) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel<T: Real> {
    pub legs: Vec<LegChain<T>>,
    /// Total mass (kg).
    pub mass: T,
    /// Shared actuator torque limit (N·m).
    pub torque_limit: T,
    /// Optional per-joint torque limits, used by exact-kinematics planning.
    pub joint_torque_limits: Option<Vec<T>>,
    /// Radius of the reachable-workspace sphere around each hip (m).
    pub reach_radius: T,
    pub max_body_step: Vector3<T>,
    pub max_body_rotation_step: Vector3<T>,
    pub max_toe_step: T,
    /// Virtual joint spring constants (N·m/rad).
    pub joint_stiffness: Vec<T>,
    /// Worst-case `‖Jᵀ‖∞` over all legs (m), see [`max_jacobian_infnorm`].
    pub jacobian_bound: T,
}

pub const LEG_NAMES: [&str; 6] = ["LF", "LM", "LR", "RF", "RM", "RR"];

impl<T: Real> RobotModel<T> {
    /// Default desk-scale hexapod: 10 kg body, three-joint coxa/femur/tibia
    /// legs with 0.54 m total length, hips 0.12 m off the body midline.
    pub fn desk_hexapod() -> Self {
        let half_pi = T::frac_pi_2();
        let legs = LEG_NAMES
            .iter()
            .map(|name| {
                let left = name.starts_with('L');
                let x = match &name[1..] {
                    "F" => 0.2,
                    "M" => 0.0,
                    _ => -0.2,
                };
                let side = if left { 1.0 } else { -1.0 };
                LegChain {
                    name: (*name).to_string(),
                    hip_offset: Vector3::new(lit(x), lit(0.12 * side), T::zero()),
                    hip_yaw_mount: if left { half_pi } else { -half_pi },
                    joints: vec![
                        Joint::new(Vector3::z(), lit(0.06), lit(-0.8), lit(0.8)),
                        Joint::new(-Vector3::y(), lit(0.22), lit(-1.4), lit(1.4)),
                        Joint::new(Vector3::y(), lit(0.26), lit(-0.3), lit(2.5)),
                    ],
                    reach_radius: None,
                    max_toe_step: None,
                    nominal_angles: vec![T::zero(), lit(0.3), lit(1.2)],
                }
            })
            .collect();
        let mut robot = Self {
            legs,
            mass: lit(10.0),
            torque_limit: lit(DESK_TORQUE_LIMIT),
            joint_torque_limits: None,
            reach_radius: lit(0.52),
            max_body_step: Vector3::repeat(lit(0.15)),
            max_body_rotation_step: Vector3::repeat(lit(0.3)),
            max_toe_step: lit(0.3),
            joint_stiffness: vec![lit(2000.0); 3],
            jacobian_bound: T::one(),
        };
        robot.jacobian_bound = robot.compute_jacobian_bound(DEFAULT_GRID_RESOLUTION);
        robot
    }

    pub fn compute_jacobian_bound(&self, grid_resolution: usize) -> T {
        self.legs
            .iter()
            .map(|l| max_jacobian_infnorm(l, grid_resolution))
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn leg_reach(&self, leg: usize) -> T {
        self.legs[leg].reach_radius.unwrap_or(self.reach_radius)
    }

    pub fn toe_step(&self, leg: usize) -> T {
        self.legs[leg].max_toe_step.unwrap_or(self.max_toe_step)
    }

    /// Conservative per-component force bound `τ_max / (S_τ · max‖Jᵀ‖∞)`.
    pub fn force_bound(&self, s_tau: T) -> T {
        force_bound(self.torque_limit, self.jacobian_bound, s_tau)
    }

    pub fn validate(&self) -> Result<()> {
        if self.legs.is_empty() {
            return Err(Error::InvalidModel("robot has no legs".into()));
        }
        for leg in &self.legs {
            leg.validate()?;
            if leg.dof() != self.joint_stiffness.len() {
                return Err(Error::InvalidModel(format!(
                    "leg `{}`: joint_stiffness needs one entry per joint",
                    leg.name
                )));
            }
        }
        let positive = |v: T| v > T::zero();
        if !positive(self.mass) {
            return Err(Error::InvalidModel("mass must be positive".into()));
        }
        if !positive(self.torque_limit) {
            return Err(Error::InvalidModel("torque_limit must be positive".into()));
        }
        if !positive(self.reach_radius) {
            return Err(Error::InvalidModel("reach_radius must be positive".into()));
        }
        if !self.max_body_step.iter().all(|&v| positive(v)) {
            return Err(Error::InvalidModel("max_body_step entries must be positive".into()));
        }
        if !self.max_body_rotation_step.iter().all(|&v| positive(v)) {
            return Err(Error::InvalidModel("max_body_rotation_step entries must be positive".into()));
        }
        if !positive(self.max_toe_step) {
            return Err(Error::InvalidModel("max_toe_step must be positive".into()));
        }
        if !self.joint_stiffness.iter().all(|&v| positive(v)) {
            return Err(Error::InvalidModel("joint_stiffness entries must be positive".into()));
        }
        if !positive(self.jacobian_bound) {
            return Err(Error::InvalidModel("jacobian_bound must be positive".into()));
        }
        if let Some(limits) = &self.joint_torque_limits {
            if !limits.iter().all(|&v| positive(v)) {
                return Err(Error::InvalidModel("joint_torque_limits entries must be positive".into()));
            }
            if self.legs.iter().any(|l| l.dof() != limits.len()) {
                return Err(Error::InvalidModel("joint_torque_limits needs one entry per joint".into()));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_GRID_RESOLUTION: usize = 24;
pub const DESK_TORQUE_LIMIT: f64 = 95.0;

pub fn force_bound<T: Real>(torque_limit: T, jacobian_bound: T, s_tau: T) -> T {
    torque_limit / (s_tau * jacobian_bound)
}
