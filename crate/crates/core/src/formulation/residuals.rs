//! Constraint residuals in physical units and the plan cost.
//!
//! Every residual is a nonnegative hinge that vanishes exactly on the
//! feasible set of its constraint.

use nalgebra::{Vector3, Vector6};

use super::{ForceCost, KinematicsMode, PlanProblem, ResidualReport, RoundState, L1_SMOOTHING};
use crate::error::{Error, Result};
use crate::kinematics::{force_bound, jacobian, RobotModel};
use crate::scene::{signed_distance, Scene, Surface};
use crate::{lit, Real};

fn hinge<T: Real>(x: T) -> T {
    x.max(T::zero())
}

/// Force balance (N) followed by moment balance about the COM (N·m).
pub fn equilibrium_residual<T: Real>(round: &RoundState<T>, robot: &RobotModel<T>, scene: &Scene<T>) -> Vector6<T> {
    let mut force = scene.gravity * robot.mass;
    let mut moment = Vector3::zeros();
    for (leg, forces) in round.forces.iter().enumerate() {
        let r = round.toes[leg] - round.com;
        for f in forces {
            force += f;
            moment += r.cross(f);
        }
        moment += round.contact_torques[leg];
    }
    Vector6::new(force.x, force.y, force.z, moment.x, moment.y, moment.z)
}

/// Distance by which each toe leaves its hip-centred workspace sphere (m).
pub fn sphere_reachability_residual<T: Real>(round: &RoundState<T>, robot: &RobotModel<T>) -> Vec<T> {
    let rot = round.pose().rotation();
    robot
        .legs
        .iter()
        .enumerate()
        .map(|(i, leg)| {
            let hip = round.com + rot * leg.hip_offset;
            hinge((round.toes[i] - hip).norm() - robot.leg_reach(i))
        })
        .collect()
}

/// Box violations of the body translation (3), body rotation (3) and toe
/// displacement (3 per leg) between consecutive rounds.
pub fn step_size_residual<T: Real>(prev: &RoundState<T>, next: &RoundState<T>, robot: &RobotModel<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(6 + 3 * next.toes.len());
    let dc = next.com - prev.com;
    let dt = next.body_euler - prev.body_euler;
    for k in 0..3 {
        out.push(hinge(dc[k].abs() - robot.max_body_step[k]));
    }
    for k in 0..3 {
        out.push(hinge(dt[k].abs() - robot.max_body_rotation_step[k]));
    }
    for (leg, (a, b)) in prev.toes.iter().zip(&next.toes).enumerate() {
        let d = b - a;
        for k in 0..3 {
            out.push(hinge(d[k].abs() - robot.toe_step(leg)));
        }
    }
    out
}

/// Normal and tangential components of a world force at a contact point.
pub fn normal_tangential<T: Real>(force: &Vector3<T>, surface: &Surface<T>, p: &Vector3<T>) -> (T, T) {
    let n = surface.normal_at(p).unwrap_or(Vector3::zeros());
    let fz = n.dot(force);
    let ft = (force - n * fz).norm();
    (fz, ft)
}

/// Scaled Coulomb cone `‖f_t‖ ≤ (μ/S_μ) f_z` merged with unilaterality.
pub fn friction_cone_residual<T: Real>(force: &Vector3<T>, surface: &Surface<T>, p: &Vector3<T>, s_mu: T) -> T {
    let (fz, ft) = normal_tangential(force, surface, p);
    let mu = surface.friction / s_mu;
    hinge(ft - mu * fz).max(hinge(-fz))
}

/// Violation of `‖f‖∞ ≤ τ_max / (S_τ · jmax)` (N).
pub fn force_bound_residual<T: Real>(force: &Vector3<T>, robot: &RobotModel<T>, jmax: T, s_tau: T) -> T {
    hinge(force.amax() - force_bound(robot.torque_limit, jmax, s_tau))
}

/// Per-leg violation of the joint torque limit `‖J(θ)ᵀ f‖∞ ≤ τ_max / S_τ`,
/// with the leg force expressed in the body frame (N·m).
pub fn exact_torque_residual<T: Real>(round: &RoundState<T>, robot: &RobotModel<T>, s_tau: T) -> Result<Vec<T>> {
    let angles = round.joint_angles.as_ref().ok_or(Error::ModeMismatch { expected: "exact" })?;
    let rt = round.pose().rotation().transpose();
    Ok(robot
        .legs
        .iter()
        .enumerate()
        .map(|(i, leg)| {
            let tau = jacobian(leg, &angles[i]).transpose() * (rt * round.leg_force(i));
            tau.iter()
                .enumerate()
                .map(|(k, t)| {
                    let limit = robot.joint_torque_limits.as_ref().map_or(robot.torque_limit, |l| l[k]);
                    hinge(t.abs() - limit / s_tau)
                })
                .fold(T::zero(), |a, b| a.max(b))
        })
        .collect())
}

/// Violations of the toe/joint-angle consistency `p = c + R q(θ)` (m).
pub fn exact_fk_residual<T: Real>(round: &RoundState<T>, robot: &RobotModel<T>) -> Result<Vec<T>> {
    let angles = round.joint_angles.as_ref().ok_or(Error::ModeMismatch { expected: "exact" })?;
    let pose = round.pose();
    Ok(robot
        .legs
        .iter()
        .enumerate()
        .map(|(i, leg)| (crate::kinematics::forward_kinematics(leg, &angles[i], &pose) - round.toes[i]).norm())
        .collect())
}

/// Hinges of the contact complementarity for one (leg, surface) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityHinges<T> {
    /// `max(0, −f_z)` (N).
    pub unilateral: T,
    /// `max(0, −d)` on solid surfaces (m).
    pub penetration: T,
    /// `max(0, f_z·d − relax)`; on open patches `|f_z·d|` (N·m).
    pub product: T,
}

/// Complementarity hinges per `[leg][candidate]`.
pub fn complementarity_residual<T: Real>(
    round: &RoundState<T>,
    scene: &Scene<T>,
    relax: T,
) -> Vec<Vec<ComplementarityHinges<T>>> {
    scene
        .candidate_map
        .iter()
        .enumerate()
        .map(|(leg, cands)| {
            cands
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let surface = &scene.surfaces[s];
                    let p = round.toes[leg];
                    let (fz, _) = normal_tangential(&round.forces[leg][k], surface, &p);
                    let d = signed_distance(surface, &p);
                    let prod = if surface.solid { fz * d } else { (fz * d).abs() };
                    ComplementarityHinges {
                        unilateral: hinge(-fz),
                        penetration: if surface.solid { hinge(-d) } else { T::zero() },
                        product: hinge(prod - relax),
                    }
                })
                .collect()
        })
        .collect()
}

/// Normal force of a leg summed over its candidate surfaces (N).
pub fn leg_normal_force<T: Real>(round: &RoundState<T>, scene: &Scene<T>, leg: usize) -> T {
    scene.candidate_map[leg]
        .iter()
        .enumerate()
        .map(|(k, &s)| normal_tangential(&round.forces[leg][k], &scene.surfaces[s], &round.toes[leg]).0)
        .fold(T::zero(), |a, b| a + b)
}

/// Per leg, `max(0, F(j−1)·F(j) − relax)` with `F` the summed normal force
/// (N²).
pub fn switchability_residual<T: Real>(prev: &RoundState<T>, next: &RoundState<T>, scene: &Scene<T>, relax: T) -> Vec<T> {
    (0..next.toes.len())
        .map(|leg| hinge(leg_normal_force(prev, scene, leg) * leg_normal_force(next, scene, leg) - relax))
        .collect()
}

/// Per pair, `max(0, f_z · max_row(a·p − b) − relax)`: a loaded contact must
/// lie inside its surface's contact patch (N·m).
pub fn region_residual<T: Real>(round: &RoundState<T>, scene: &Scene<T>, relax: T) -> Vec<Vec<T>> {
    scene
        .candidate_map
        .iter()
        .enumerate()
        .map(|(leg, cands)| {
            cands
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let surface = &scene.surfaces[s];
                    if surface.region.is_unbounded() {
                        return T::zero();
                    }
                    let p = round.toes[leg];
                    let (fz, _) = normal_tangential(&round.forces[leg][k], surface, &p);
                    let region = surface.region.normalized();
                    region
                        .rows
                        .iter()
                        .map(|h| hinge(fz * (h.normal.dot(&p) - h.offset) - relax))
                        .fold(T::zero(), |a, b| a.max(b))
                })
                .collect()
        })
        .collect()
}

/// Per pair, `max(0, −d) · max(0, −max_row(a·p − b))` on bounded open
/// patches: depth below the patch times depth inside its footprint, zero
/// unless the toe is inside the body under the patch (m²).
pub fn keep_out_residual<T: Real>(round: &RoundState<T>, scene: &Scene<T>) -> Vec<Vec<T>> {
    scene
        .candidate_map
        .iter()
        .enumerate()
        .map(|(leg, cands)| {
            cands
                .iter()
                .map(|&s| {
                    let surface = &scene.surfaces[s];
                    if surface.solid || surface.region.is_unbounded() {
                        return T::zero();
                    }
                    let p = round.toes[leg];
                    hinge(-signed_distance(surface, &p)) * hinge(-surface.region.normalized().violation(&p))
                })
                .collect()
        })
        .collect()
}

/// Per leg, `max(0, max_k |F(j)·Δp_k| − relax)`: a loaded toe may not have
/// moved since the previous round (N·m).
pub fn stance_hold_residual<T: Real>(prev: &RoundState<T>, next: &RoundState<T>, scene: &Scene<T>, relax: T) -> Vec<T> {
    (0..next.toes.len())
        .map(|leg| {
            let f = leg_normal_force(next, scene, leg);
            let d = next.toes[leg] - prev.toes[leg];
            hinge((d * f).amax() - relax)
        })
        .collect()
}

/// Per leg, distance beyond the terminal tolerance from the target (m).
pub fn terminal_residual<T: Real>(last: &RoundState<T>, problem: &PlanProblem<T>) -> Vec<T> {
    last.toes
        .iter()
        .zip(&problem.targets.toes)
        .map(|(p, d)| hinge((p - d).norm() - problem.terminal_tolerance))
        .collect()
}

fn smooth_abs<T: Real>(x: T) -> T {
    let eps = lit::<T>(L1_SMOOTHING);
    (x * x + eps * eps).sqrt() - eps
}

/// Plan cost: terminal toe (and optional body) error plus per-round motion
/// and force terms, summed over rounds `1..=M`. `rounds` excludes round 0.
pub fn objective<T: Real>(rounds: &[RoundState<T>], problem: &PlanProblem<T>) -> T {
    assert_eq!(rounds.len(), problem.rounds, "one state per planning round");
    let w = &problem.weights;
    let quad = |v: &Vector3<T>, q: &nalgebra::Matrix3<T>| (v.transpose() * q * v)[0];
    let last = &rounds[rounds.len() - 1];
    let mut cost = T::zero();
    for (p, d) in last.toes.iter().zip(&problem.targets.toes) {
        cost += quad(&(p - d), &w.q_p);
    }
    if let Some(body) = &problem.targets.body {
        cost += quad(&(last.com - body.position), &w.q_body);
        cost += quad(&(last.body_euler - body.euler), &w.q_body);
    }
    let mut prev = &problem.initial_stance;
    for round in rounds {
        cost += quad(&(round.com - prev.com), &w.q_c);
        cost += quad(&(round.body_euler - prev.body_euler), &w.q_theta);
        for (a, b) in prev.toes.iter().zip(&round.toes) {
            cost += quad(&(b - a), &w.q_delta);
        }
        for f in round.forces.iter().flatten() {
            cost += w.w_force
                * match w.force_cost {
                    ForceCost::L1 => f.iter().fold(T::zero(), |a, &x| a + smooth_abs(x)),
                    ForceCost::L2 => f.norm_squared(),
                };
        }
        prev = round;
    }
    cost
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn max_of<T: Real>(it: impl IntoIterator<Item = T>) -> T {
    it.into_iter().fold(T::zero(), |a, b| a.max(b))
}

impl ResidualReport {
    /// Recomputes every family over a plan (`rounds` excludes round 0) with
    /// exact complementarity, in normalized units.
    pub fn compute<T: Real>(problem: &PlanProblem<T>, rounds: &[RoundState<T>]) -> ResidualReport {
        let force = problem.force_scale();
        let length = problem.length_scale();
        let robot = &problem.robot;
        let scene = &problem.scene;
        let mut r = ResidualReport::default();
        let up = |slot: &mut f64, v: T| *slot = slot.max(to_f64(v));

        let mut prev = &problem.initial_stance;
        for (j, round) in rounds.iter().enumerate() {
            let eq = equilibrium_residual(round, robot, scene);
            up(&mut r.equilibrium_force, eq.fixed_rows::<3>(0).norm() / force);
            up(&mut r.equilibrium_moment, eq.fixed_rows::<3>(3).norm() / (force * length));

            match problem.kinematics_mode {
                KinematicsMode::Sphere => {
                    up(&mut r.reachability, max_of(sphere_reachability_residual(round, robot)) / length);
                    let rt = round.pose().rotation().transpose();
                    for leg in 0..round.toes.len() {
                        let fb = force_bound_residual(&(rt * round.leg_force(leg)), robot, robot.jacobian_bound, problem.s_tau);
                        up(&mut r.force_bound, fb / force);
                    }
                }
                KinematicsMode::Exact => {
                    match exact_fk_residual(round, robot) {
                        Ok(v) => up(&mut r.reachability, max_of(v) / length),
                        Err(_) => r.reachability = f64::INFINITY,
                    }
                    match exact_torque_residual(round, robot, problem.s_tau) {
                        Ok(v) => up(&mut r.force_bound, max_of(v) / robot.torque_limit),
                        Err(_) => r.force_bound = f64::INFINITY,
                    }
                }
            }

            let steps = step_size_residual(prev, round, robot);
            for (k, v) in steps.iter().enumerate() {
                let scaled = if (3..6).contains(&k) { *v } else { *v / length };
                up(&mut r.step_size, scaled);
            }

            for (leg, cands) in scene.candidate_map.iter().enumerate() {
                for (k, &s) in cands.iter().enumerate() {
                    let v = friction_cone_residual(&round.forces[leg][k], &scene.surfaces[s], &round.toes[leg], problem.s_mu);
                    up(&mut r.friction_cone, v / force);
                }
            }
            for h in complementarity_residual(round, scene, T::zero()).iter().flatten() {
                up(&mut r.complementarity, h.unilateral / force);
                up(&mut r.complementarity, h.penetration / length);
                up(&mut r.complementarity, h.product / (force * length));
            }
            for v in region_residual(round, scene, T::zero()).into_iter().flatten() {
                up(&mut r.region, v / (force * length));
            }
            if problem.switchability && j >= 1 {
                up(&mut r.switchability, max_of(switchability_residual(prev, round, scene, T::zero())) / (force * force));
            }
            up(&mut r.stance_hold, max_of(stance_hold_residual(prev, round, scene, T::zero())) / (force * length));
            for v in keep_out_residual(round, scene).into_iter().flatten() {
                up(&mut r.keep_out, v / (length * length));
            }
            prev = round;
        }
        if let Some(last) = rounds.last() {
            up(&mut r.terminal, max_of(terminal_residual(last, problem)) / length);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Joint, LegChain};
    use crate::scene::{Region, SurfaceKind};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn ground() -> Surface<f64> {
        Surface::plane("ground", Vector3::zeros(), Vector3::z(), 1.0)
    }

    fn robot_with(legs: usize) -> RobotModel<f64> {
        let mut r = RobotModel::<f64>::desk_hexapod();
        r.legs.truncate(legs);
        r
    }

    fn one_leg_scene() -> Scene<f64> {
        Scene { surfaces: vec![ground()], gravity: Vector3::new(0.0, 0.0, -9.81), candidate_map: vec![vec![0]] }
    }

    fn state(com: Vector3<f64>, toes: Vec<Vector3<f64>>, forces: Vec<Vector3<f64>>) -> RoundState<f64> {
        let n = toes.len();
        RoundState {
            com,
            body_euler: Vector3::zeros(),
            toes,
            forces: forces.into_iter().map(|f| vec![f]).collect(),
            joint_angles: None,
            contact_torques: vec![Vector3::zeros(); n],
        }
    }

    #[test]
    fn single_support_balances_gravity() {
        let robot = robot_with(1);
        let com = Vector3::new(0.0, 0.0, 0.3);
        let s = state(com, vec![com - Vector3::new(0.0, 0.0, 0.3)], vec![Vector3::new(0.0, 0.0, 10.0 * 9.81)]);
        assert!(equilibrium_residual(&s, &robot, &one_leg_scene()).norm() < 1e-12);
    }

    #[test]
    fn zero_forces_leave_gravity() {
        let robot = robot_with(1);
        let s = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::zeros()]);
        let r = equilibrium_residual(&s, &robot, &one_leg_scene());
        assert_relative_eq!(r[2], -98.1, epsilon = 1e-12);
        assert_eq!(r.fixed_rows::<3>(3).norm(), 0.0);
    }

    #[test]
    fn symmetric_supports_cancel_moments() {
        let robot = robot_with(2);
        let scene = Scene { candidate_map: vec![vec![0], vec![0]], ..one_leg_scene() };
        let com = Vector3::new(0.1, 0.0, 0.3);
        let s = state(
            com,
            vec![Vector3::new(0.4, 0.2, 0.0), Vector3::new(-0.2, -0.2, 0.0)],
            vec![Vector3::new(0.0, 0.0, 49.05), Vector3::new(0.0, 0.0, 49.05)],
        );
        let r = equilibrium_residual(&s, &robot, &scene);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn sphere_reachability_examples() {
        let robot = robot_with(1);
        let hip = robot.legs[0].hip_offset;
        let s = state(Vector3::zeros(), vec![hip], vec![Vector3::zeros()]);
        assert_eq!(sphere_reachability_residual(&s, &robot)[0], 0.0);
        let far = hip + Vector3::new(0.0, 0.0, -(robot.reach_radius + 0.1));
        let s = state(Vector3::zeros(), vec![far], vec![Vector3::zeros()]);
        assert_relative_eq!(sphere_reachability_residual(&s, &robot)[0], 0.1, epsilon = 1e-12);

        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let toe = hip + Vector3::new(0.7, 0.1, -0.1);
        let mut a = state(Vector3::zeros(), vec![toe], vec![Vector3::zeros()]);
        let before = sphere_reachability_residual(&a, &robot)[0];
        a.body_euler = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        a.toes[0] = rz * toe;
        assert_relative_eq!(sphere_reachability_residual(&a, &robot)[0], before, epsilon = 1e-12);
    }

    #[test]
    fn step_size_examples() {
        let robot = robot_with(1);
        let a = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::zeros()]);
        assert!(step_size_residual(&a, &a, &robot).iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.com = robot.max_body_step;
        assert!(step_size_residual(&a, &b, &robot).iter().all(|&v| v == 0.0));
        let mut c = a.clone();
        c.toes[0] = Vector3::new(0.4, 0.0, 0.0);
        let r = step_size_residual(&a, &c, &robot);
        assert_relative_eq!(r.iter().cloned().fold(0.0, f64::max), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn friction_cone_examples() {
        let g = ground();
        let p = Vector3::zeros();
        assert_eq!(friction_cone_residual(&Vector3::new(0.0, 0.0, 10.0), &g, &p, 1.1), 0.0);
        let v = friction_cone_residual(&Vector3::new(9.1, 0.0, 10.0), &g, &p, 1.1);
        assert_relative_eq!(v, 9.1 - 10.0 / 1.1, epsilon = 1e-12);
        assert!((v - 0.009).abs() < 1e-3);
        assert_eq!(friction_cone_residual(&Vector3::new(0.0, 0.0, -1.0), &g, &p, 1.1), 1.0);
    }

    #[test]
    fn friction_depends_only_on_ratio() {
        let mut g = ground();
        let f = Vector3::new(3.0, 4.0, 2.0);
        let a = friction_cone_residual(&f, &g, &Vector3::zeros(), 1.3);
        g.friction *= 2.5;
        let b = friction_cone_residual(&f, &g, &Vector3::zeros(), 1.3 * 2.5);
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn force_bound_examples() {
        let mut robot = robot_with(1);
        robot.torque_limit = 27.0;
        let b: f64 = force_bound(27.0, 0.9635, 1.8);
        assert!((b - 15.57).abs() < 0.01);
        assert_eq!(force_bound_residual(&Vector3::new(0.0, 0.0, 15.0), &robot, 0.9635, 1.8), 0.0);
        assert!((force_bound(27.0_f64, 0.9635, 0.85) - 32.97).abs() < 0.01);
        assert_relative_eq!(force_bound_residual(&Vector3::new(0.0, -16.0, 1.0), &robot, 0.9635, 1.8), 16.0 - b);
    }

    fn arm() -> RobotModel<f64> {
        let mut robot = robot_with(1);
        robot.legs[0] = LegChain {
            name: "arm".into(),
            hip_offset: Vector3::zeros(),
            hip_yaw_mount: 0.0,
            joints: vec![Joint::new(Vector3::z(), 1.0, -1.0, 1.0)],
            reach_radius: None,
            max_toe_step: None,
            nominal_angles: vec![0.0],
        };
        robot.torque_limit = 27.0;
        robot.joint_stiffness = vec![100.0];
        robot
    }

    #[test]
    fn exact_torque_examples() {
        let robot = arm();
        let mut s = state(Vector3::zeros(), vec![Vector3::x()], vec![Vector3::zeros()]);
        assert!(matches!(exact_torque_residual(&s, &robot, 1.0), Err(Error::ModeMismatch { .. })));
        s.joint_angles = Some(vec![vec![0.0]]);
        assert_eq!(exact_torque_residual(&s, &robot, 1.0).unwrap()[0], 0.0);
        s.forces[0][0] = Vector3::new(0.0, 30.0, 0.0);
        assert_relative_eq!(exact_torque_residual(&s, &robot, 1.0).unwrap()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_torque_matches_kinematics_jacobian() {
        let robot = robot_with(6);
        let theta = vec![0.2, -0.4, 1.1];
        let mut s = state(Vector3::zeros(), vec![Vector3::zeros(); 6], vec![Vector3::zeros(); 6]);
        s.body_euler = Vector3::new(0.1, -0.2, 0.3);
        s.joint_angles = Some(vec![theta.clone(); 6]);
        let f = Vector3::new(12.0, -30.0, 44.0);
        s.forces[2][0] = f;
        let rt = s.pose().rotation().transpose();
        let tau = jacobian(&robot.legs[2], &theta).transpose() * (rt * f);
        let expected = (tau.amax() - robot.torque_limit / 1.3).max(0.0);
        assert!((exact_torque_residual(&s, &robot, 1.3).unwrap()[2] - expected).abs() < 1e-10);
    }

    #[test]
    fn complementarity_examples() {
        let scene = one_leg_scene();
        let s = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::new(0.0, 0.0, 5.0)]);
        let h = complementarity_residual(&s, &scene, 0.0)[0][0];
        assert_eq!((h.unilateral, h.penetration, h.product), (0.0, 0.0, 0.0));
        let s = state(Vector3::zeros(), vec![Vector3::new(0.0, 0.0, 0.18)], vec![Vector3::zeros()]);
        assert_eq!(complementarity_residual(&s, &scene, 0.0)[0][0].product, 0.0);
        let s = state(Vector3::zeros(), vec![Vector3::new(0.0, 0.0, 0.01)], vec![Vector3::new(0.0, 0.0, 5.0)]);
        assert_relative_eq!(complementarity_residual(&s, &scene, 0.0)[0][0].product, 0.05, epsilon = 1e-15);
        let s = state(Vector3::zeros(), vec![Vector3::new(0.0, 0.0, -0.01)], vec![Vector3::zeros()]);
        assert_relative_eq!(complementarity_residual(&s, &scene, 0.0)[0][0].penetration, 0.01);
    }

    #[test]
    fn open_patch_product_is_two_sided() {
        let patch = ground().open().with_region(Region::unbounded());
        let scene = Scene { surfaces: vec![patch], ..one_leg_scene() };
        let s = state(Vector3::zeros(), vec![Vector3::new(0.0, 0.0, -0.02)], vec![Vector3::new(0.0, 0.0, 5.0)]);
        let h = complementarity_residual(&s, &scene, 0.0)[0][0];
        assert_eq!(h.penetration, 0.0);
        assert_relative_eq!(h.product, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn keep_out_only_inside_the_body_under_a_patch() {
        use crate::scene::HalfSpace;
        // Box top at z = 0.15 over x in [0, 0.2].
        let top = Surface::plane("top", Vector3::new(0.0, 0.0, 0.15), Vector3::z(), 0.4).open().with_region(Region::new(vec![
            HalfSpace { normal: Vector3::x(), offset: 0.2 },
            HalfSpace { normal: -Vector3::x(), offset: 0.0 },
        ]));
        let scene = Scene { surfaces: vec![top], ..one_leg_scene() };
        let at = |p: Vector3<f64>| keep_out_residual(&state(Vector3::zeros(), vec![p], vec![Vector3::zeros()]), &scene)[0][0];
        assert_relative_eq!(at(Vector3::new(0.05, 0.0, 0.1)), 0.05 * 0.05, epsilon = 1e-15);
        assert_eq!(at(Vector3::new(0.1, 0.0, 0.15)), 0.0);
        assert_eq!(at(Vector3::new(0.1, 0.0, 0.3)), 0.0);
        assert_eq!(at(Vector3::new(-0.05, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn switchability_examples() {
        let scene = one_leg_scene();
        let loaded = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::new(0.0, 0.0, 10.0)]);
        let swing = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::zeros()]);
        assert_eq!(switchability_residual(&loaded, &swing, &scene, 0.0)[0], 0.0);
        assert_relative_eq!(switchability_residual(&loaded, &loaded, &scene, 0.0)[0], 100.0);
    }

    #[test]
    fn cylinder_normal_force() {
        let tube = Surface::cylinder("t", SurfaceKind::CylinderInterior, Vector3::zeros(), Vector3::z(), 1.0, 1.0);
        let (fz, ft) = normal_tangential(&Vector3::new(-3.0, 0.0, 4.0), &tube, &Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(fz, 3.0);
        assert_relative_eq!(ft, 4.0);
    }

    fn flat_problem() -> PlanProblem<f64> {
        let robot = robot_with(1);
        let scene = one_leg_scene();
        let stance = state(Vector3::zeros(), vec![Vector3::zeros()], vec![Vector3::zeros()]);
        PlanProblem {
            robot,
            scene,
            rounds: 1,
            s_mu: 1.0,
            s_tau: 1.0,
            weights: super::super::CostWeights { w_force: 0.0, ..Default::default() },
            targets: super::super::Targets { toes: vec![Vector3::zeros()], body: None },
            initial_stance: stance,
            switchability: false,
            kinematics_mode: KinematicsMode::Sphere,
            terminal_tolerance: 0.002,
        }
    }

    #[test]
    fn objective_examples() {
        let mut problem = flat_problem();
        let at_target = problem.initial_stance.clone();
        assert_eq!(objective(std::slice::from_ref(&at_target), &problem), 0.0);

        problem.weights.q_c = Matrix3::zeros();
        problem.weights.q_theta = Matrix3::zeros();
        problem.weights.q_delta = Matrix3::zeros();
        let mut off = at_target.clone();
        off.toes[0] = Vector3::new(0.1, 0.0, 0.0);
        assert_relative_eq!(objective(std::slice::from_ref(&off), &problem), 0.01, epsilon = 1e-15);

        problem.weights.q_p = Matrix3::zeros();
        problem.weights.w_force = 0.5;
        let mut loaded = at_target.clone();
        loaded.forces[0][0] = Vector3::new(3.0, -2.0, 40.0);
        let mut doubled = loaded.clone();
        doubled.forces[0][0] *= 2.0;
        let a = objective(std::slice::from_ref(&loaded), &problem);
        let b = objective(std::slice::from_ref(&doubled), &problem);
        let eps = L1_SMOOTHING;
        let exact: f64 = loaded.forces[0][0]
            .iter()
            .map(|&x| ((2.0 * x).powi(2) + eps * eps).sqrt() - (x * x + eps * eps).sqrt())
            .sum();
        assert_relative_eq!(b - a, 0.5 * exact, epsilon = 1e-12);
        assert_relative_eq!(b - a, 0.5 * 45.0, epsilon = 0.01);
    }
}
