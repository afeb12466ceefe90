//! Continuous trajectories from a round plan, and the joint-spring
//! deflections that realise the planned contact forces on a position
//! controlled robot.
//!
//! Body coordinates are natural cubic splines through the round waypoints.
//! Toes are held still while they support and follow a three-point cubic
//! through a lifted midpoint while they swing.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{PlanProblem, RoundState};
use crate::geometry::euler_rotation;
use crate::kinematics::{inverse_kinematics, vjm_leg_stiffness, RobotModel, LEG_NAMES};
use crate::scene::{signed_distance, Scene};
use crate::solver::SolveResult;

/// Toe displacement below which a leg counts as standing still (m).
pub const STILL_THRESHOLD: f64 = 1e-5;
/// Relative least-squares residual above which the deflection system is
/// reported inconsistent.
pub const INCONSISTENCY_THRESHOLD: f64 = 1e-3;
/// Relative residual up to which a deflection system counts as consistent.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-8;
/// Deflections larger than this usually mean a modelling error (m).
pub const DEFAULT_DEFLECTION_CAP: f64 = 0.02;
/// Lift retries when a swing path would dip into a surface.
const LIFT_RETRIES: usize = 8;
/// Samples per swing used to test for penetration.
pub const SWING_SAMPLES: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryOptions {
    /// Duration of one round (s).
    pub round_duration: f64,
    /// Lift of the swing midpoint along the blended surface normal (m).
    pub swing_clearance: f64,
    /// CSV rows per round.
    pub samples_per_round: usize,
    /// Allowed penetration of a swing path (m).
    pub penetration_tolerance: f64,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self { round_duration: 4.0, swing_clearance: 0.05, samples_per_round: 20, penetration_tolerance: 1e-6 }
    }
}

impl TrajectoryOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.round_duration > 0.0) || !(self.swing_clearance >= 0.0) || self.samples_per_round == 0 {
            return Err(Error::InvalidOptions(
                "round_duration must be positive, swing_clearance nonnegative and samples_per_round at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Natural cubic spline through `(knots[i], values[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// Second derivatives at the knots.
    pub curvature: Vec<f64>,
}

impl CubicSpline {
    /// Panics unless the knots are strictly increasing and match the values.
    pub fn natural(knots: &[f64], values: &[f64]) -> Self {
        assert_eq!(knots.len(), values.len(), "one value per knot");
        assert!(!knots.is_empty(), "at least one knot");
        assert!(knots.windows(2).all(|w| w[1] > w[0]), "knots must increase");
        let n = knots.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for the interior second derivatives.
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Self { knots: knots.to_vec(), values: values.to_vec(), curvature: m }
    }

    /// Value at `t`, clamped to the knot range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if n == 1 || t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let i = self.knots.partition_point(|&k| k <= t) - 1;
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let (a, b) = ((t1 - t) / h, (t - t0) / h);
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        self.values[i] + b * (self.values[i + 1] - self.values[i]) + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

/// Three splines sharing knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpline {
    pub axes: [CubicSpline; 3],
}

impl PathSpline {
    pub fn through(knots: &[f64], points: &[Vector3<f64>]) -> Self {
        let axis = |k: usize| CubicSpline::natural(knots, &points.iter().map(|p| p[k]).collect::<Vec<_>>());
        Self { axes: [axis(0), axis(1), axis(2)] }
    }

    pub fn eval(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.axes[0].eval(t), self.axes[1].eval(t), self.axes[2].eval(t))
    }
}

/// Toe motion over one round interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToeSegment {
    /// Toe stays at this point for the whole interval.
    Hold(Vector3<f64>),
    Swing {
        path: PathSpline,
        /// Midpoint lift actually used (m).
        lift: f64,
        /// Unit direction of the lift.
        normal: Vector3<f64>,
        /// Deepest sampled penetration of any candidate surface (m, ≥ 0).
        penetration: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Round times `0, T, …, M·T`.
    pub knots: Vec<f64>,
    /// Waypoints of rounds `0..=M`.
    pub rounds: Vec<RoundState<f64>>,
    /// CoM x, y, z and body Euler angles.
    pub body: [CubicSpline; 6],
    /// `toes[leg][j − 1]` covers `[t_{j−1}, t_j]`.
    pub toes: Vec<Vec<ToeSegment>>,
    /// Per round, per leg, total normal force on the leg's surfaces (N).
    pub normal_forces: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        *self.knots.last().expect("at least one knot")
    }

    /// Interval index of `t`; the final knot belongs to the last interval.
    fn interval(&self, t: f64) -> Option<usize> {
        let m = self.knots.len() - 1;
        (m > 0).then(|| (self.knots.partition_point(|&k| k <= t).max(1) - 1).min(m - 1))
    }

    /// CoM position and Euler angles at `t`.
    pub fn body_at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let v: Vec<f64> = self.body.iter().map(|s| s.eval(t)).collect();
        (Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    /// Toe position at `t`. At a round time the toe sits exactly on that
    /// round's waypoint.
    pub fn toe_at(&self, leg: usize, t: f64) -> Vector3<f64> {
        let Some(i) = self.interval(t) else { return self.rounds[0].toes[leg] };
        let end = self.knots[i + 1];
        if t >= end {
            return self.rounds[i + 1].toes[leg];
        }
        match &self.toes[leg][i] {
            ToeSegment::Hold(p) => *p,
            ToeSegment::Swing { path, .. } => path.eval(t),
        }
    }

    /// Round whose forces are commanded at `t`: the round being moved to.
    pub fn active_round(&self, t: f64) -> usize {
        match self.interval(t) {
            None => 0,
            Some(i) if t <= self.knots[i] && i == 0 => 0,
            Some(i) => i + 1,
        }
    }
}

/// Direction leading away from the nearest candidate feature at `p`: the
/// surface normal on a surface or its patch, and out-and-up beside or
/// above the edge of an open patch.
fn escape_direction(scene: &Scene<f64>, candidates: &[usize], p: &Vector3<f64>) -> Result<Vector3<f64>> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for &s in candidates {
        let surf = &scene.surfaces[s];
        let d = signed_distance(surf, p);
        let n = surf.normal_at(p)?;
        let region = surf.region.normalized();
        let outside = region.rows.iter().map(|h| (h, h.normal.dot(p) - h.offset)).max_by(|a, b| a.1.total_cmp(&b.1));
        let (gap, dir) = match outside {
            Some((h, v)) if !surf.solid && v > 0.0 => {
                if d < 0.0 {
                    (v, (h.normal + n).normalize())
                } else {
                    (d.hypot(v), (h.normal * v + n * d).normalize())
                }
            }
            _ => (d.abs(), n),
        };
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, dir));
        }
    }
    Ok(best.expect("leg has candidates").1)
}

/// Deepest penetration of any candidate surface among `samples` points of
/// `path` on `[t0, t1]`. Open patches count only strictly inside their
/// region.
fn swing_penetration(scene: &Scene<f64>, candidates: &[usize], path: &PathSpline, t0: f64, t1: f64, tol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..=SWING_SAMPLES {
        let p = path.eval(t0 + (t1 - t0) * k as f64 / SWING_SAMPLES as f64);
        for &s in candidates {
            let surf = &scene.surfaces[s];
            let d = signed_distance(surf, &p);
            if d >= 0.0 {
                continue;
            }
            let counts = surf.solid || surf.region.violation(&p) < -tol;
            if counts {
                worst = worst.max(-d);
            }
        }
    }
    worst
}

/// Builds the trajectory through the initial stance and `rounds` (rounds
/// `1..=M`).
pub fn interpolate(problem: &PlanProblem<f64>, rounds: &[RoundState<f64>], options: &TrajectoryOptions) -> Result<Trajectory> {
    options.validate()?;
    let scene = &problem.scene;
    let all: Vec<RoundState<f64>> = std::iter::once(problem.initial_stance.clone()).chain(rounds.iter().cloned()).collect();
    let knots: Vec<f64> = (0..all.len()).map(|j| j as f64 * options.round_duration).collect();
    let axis = |f: &dyn Fn(&RoundState<f64>) -> f64| {
        // A single knot is a constant path.
        CubicSpline::natural(&knots, &all.iter().map(f).collect::<Vec<_>>())
    };
    let body = [
        axis(&|r| r.com.x),
        axis(&|r| r.com.y),
        axis(&|r| r.com.z),
        axis(&|r| r.body_euler.x),
        axis(&|r| r.body_euler.y),
        axis(&|r| r.body_euler.z),
    ];

    let n_legs = problem.n_legs();
    let mut toes = Vec::with_capacity(n_legs);
    for leg in 0..n_legs {
        let candidates = &scene.candidate_map[leg];
        let mut segments = Vec::with_capacity(all.len().saturating_sub(1));
        for j in 1..all.len() {
            let (a, b) = (all[j - 1].toes[leg], all[j].toes[leg]);
            if (b - a).norm() <= STILL_THRESHOLD {
                segments.push(ToeSegment::Hold(a));
                continue;
            }
            let na = escape_direction(scene, candidates, &a)?;
            let nb = escape_direction(scene, candidates, &b)?;
            let blend = na + nb;
            let normal = if blend.norm() > 1e-9 { blend.normalize() } else { nb };
            let (t0, t1) = (knots[j - 1], knots[j]);
            let mut lift = options.swing_clearance;
            let mut best = None;
            for attempt in 0..=LIFT_RETRIES {
                let mid = (a + b) * 0.5 + normal * lift;
                let path = PathSpline::through(&[t0, 0.5 * (t0 + t1), t1], &[a, mid, b]);
                let penetration = swing_penetration(scene, candidates, &path, t0, t1, options.penetration_tolerance);
                let done = penetration <= options.penetration_tolerance || attempt == LIFT_RETRIES;
                best = Some(ToeSegment::Swing { path, lift, normal, penetration });
                if done {
                    break;
                }
                lift = if lift > 0.0 { lift * 2.0 } else { 0.01 };
            }
            segments.push(best.expect("at least one attempt"));
        }
        toes.push(segments);
    }

    let normal_forces = all.iter().map(|r| leg_normal_forces(r, scene)).collect();
    Ok(Trajectory { knots, rounds: all, body, toes, normal_forces })
}

/// [`interpolate`] on a solver result.
pub fn interpolate_result(result: &SolveResult, problem: &PlanProblem<f64>, options: &TrajectoryOptions) -> Result<Trajectory> {
    interpolate(problem, &result.rounds, options)
}

/// Per leg, the sum over candidate surfaces of the force component along the
/// surface normal.
pub fn leg_normal_forces(round: &RoundState<f64>, scene: &Scene<f64>) -> Vec<f64> {
    round
        .forces
        .iter()
        .enumerate()
        .map(|(leg, fs)| {
            fs.iter()
                .zip(&scene.candidate_map[leg])
                .map(|(f, &s)| scene.surfaces[s].normal_at(&round.toes[leg]).map(|n| n.dot(f)).unwrap_or(0.0))
                .sum()
        })
        .collect()
}

/// Commanded spring deflections of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflectionCommand {
    /// Legs included in the system.
    pub supporting: Vec<bool>,
    /// Contact normal used per leg (zero for legs not supporting).
    pub normals: Vec<Vector3<f64>>,
    /// Model the offsets were solved with, `Normal` or `Vector`.
    pub model: DeflectionModel,
    /// Component of the offset along the normal per leg (m).
    pub penetration: Vec<f64>,
    /// Commanded toe offset per leg (m).
    pub delta_wall: Vec<Vector3<f64>>,
    pub delta_com: Vector3<f64>,
    /// World-frame Cartesian leg stiffness (zero for legs not supporting).
    pub stiffness: Vec<Matrix3<f64>>,
    /// `‖A z − f‖ / ‖f‖` of the stacked system.
    pub relative_residual: f64,
}

impl DeflectionCommand {
    /// `K_i (δ_wall,i − δ_com)` per leg; zero for legs not supporting.
    pub fn reconstructed_forces(&self) -> Vec<Vector3<f64>> {
        (0..self.supporting.len())
            .map(|i| if self.supporting[i] { self.stiffness[i] * (self.delta_wall[i] - self.delta_com) } else { Vector3::zeros() })
            .collect()
    }

    pub fn within_cap(&self, cap: f64) -> bool {
        self.delta_com.norm() <= cap && self.delta_wall.iter().all(|d| d.norm() <= cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeflectionOptions {
    /// Legs with a total force below this carry no spring (N).
    pub force_floor: f64,
    /// Fix the body deflection at zero and solve each leg on its own.
    pub pin_com: bool,
    pub model: DeflectionModel,
}

impl Default for DeflectionOptions {
    fn default() -> Self {
        Self { force_floor: 0.5, pin_com: false, model: DeflectionModel::Auto }
    }
}

/// Unknowns of the per-leg offset `δ_wall,i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeflectionModel {
    /// One penetration along the contact normal per leg. Exact only for
    /// special load patterns; otherwise the least-squares fit is returned
    /// or, beyond [`INCONSISTENCY_THRESHOLD`], an error.
    Normal,
    /// A free offset vector per leg; consistent whenever every leg
    /// stiffness is invertible.
    Vector,
    /// `Normal` when it reproduces the forces within
    /// [`CONSISTENCY_TOLERANCE`], `Vector` otherwise.
    Auto,
}

/// Joint angles of a round: the stored ones, or inverse kinematics of the
/// body-frame toe positions.
pub fn round_joint_angles(round: &RoundState<f64>, robot: &RobotModel<f64>) -> Result<Vec<Vec<f64>>> {
    if let Some(a) = &round.joint_angles {
        return Ok(a.clone());
    }
    let rot = euler_rotation(&round.body_euler);
    robot
        .legs
        .iter()
        .zip(&round.toes)
        .map(|(leg, p)| inverse_kinematics(leg, &(rot.transpose() * (p - round.com)), None))
        .collect()
}

/// Least-squares spring deflections realising the round's contact forces.
/// Unknowns are one penetration per supporting leg along its contact normal
/// and a shared body deflection.
pub fn solve_deflections(
    round: &RoundState<f64>,
    robot: &RobotModel<f64>,
    scene: &Scene<f64>,
    options: &DeflectionOptions,
) -> Result<DeflectionCommand> {
    let n_legs = round.toes.len();
    let forces: Vec<Vector3<f64>> = (0..n_legs).map(|l| round.leg_force(l)).collect();
    let supporting: Vec<bool> = forces.iter().map(|f| f.norm() > options.force_floor).collect();
    let mut normals = vec![Vector3::zeros(); n_legs];
    let mut stiffness = vec![Matrix3::zeros(); n_legs];
    let rot = euler_rotation(&round.body_euler);
    let angles = if supporting.iter().any(|&s| s) { Some(round_joint_angles(round, robot)?) } else { None };
    for leg in (0..n_legs).filter(|&l| supporting[l]) {
        // Normal of the surface carrying the largest share of the load.
        let (_, s) = round.forces[leg]
            .iter()
            .zip(&scene.candidate_map[leg])
            .max_by(|a, b| a.0.norm().total_cmp(&b.0.norm()))
            .expect("leg has candidates");
        normals[leg] = scene.surfaces[*s].normal_at(&round.toes[leg])?;
        let k_body = vjm_leg_stiffness(&robot.legs[leg], &angles.as_ref().expect("angles")[leg], &robot.joint_stiffness)?;
        stiffness[leg] = rot * k_body * rot.transpose();
    }

    let legs: Vec<usize> = (0..n_legs).filter(|&l| supporting[l]).collect();
    let pick = |v: &[Vector3<f64>]| legs.iter().map(|&l| v[l]).collect::<Vec<_>>();
    let ks: Vec<Matrix3<f64>> = legs.iter().map(|&l| stiffness[l]).collect();
    let (fs, ns) = (pick(&forces), pick(&normals));

    let normal_fit = match options.model {
        DeflectionModel::Vector => None,
        DeflectionModel::Normal => Some(deflection_system(&fs, &ns, &ks, options.pin_com)?),
        DeflectionModel::Auto => deflection_system(&fs, &ns, &ks, options.pin_com).ok().filter(|r| r.2 <= CONSISTENCY_TOLERANCE),
    };
    let mut delta_wall = vec![Vector3::zeros(); n_legs];
    let (model, delta_com, relative_residual) = match normal_fit {
        Some((z, dc, res)) => {
            for (i, &leg) in legs.iter().enumerate() {
                delta_wall[leg] = normals[leg] * z[i];
            }
            (DeflectionModel::Normal, dc, res)
        }
        None => {
            let (v, dc, res) = vector_deflection_system(&fs, &ks, options.pin_com)?;
            for (i, &leg) in legs.iter().enumerate() {
                delta_wall[leg] = v[i];
            }
            (DeflectionModel::Vector, dc, res)
        }
    };
    let penetration = (0..n_legs).map(|l| normals[l].dot(&delta_wall[l])).collect();
    Ok(DeflectionCommand { supporting, normals, model, penetration, delta_wall, delta_com, stiffness, relative_residual })
}

/// Minimum-norm solution of `f_i = K_i (δ_i − δ_com)` with a free offset
/// vector per leg. Returns the offsets, the body deflection (zero when
/// pinned) and the relative residual.
pub fn vector_deflection_system(
    forces: &[Vector3<f64>],
    stiffness: &[Matrix3<f64>],
    pin_com: bool,
) -> Result<(Vec<Vector3<f64>>, Vector3<f64>, f64)> {
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let directions: Vec<&[Vector3<f64>]> = forces.iter().map(|_| &axes[..]).collect();
    let (z, dc, res) = stacked_system(forces, &directions, stiffness, pin_com)?;
    Ok((z.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(), dc, res))
}

/// Least squares for `f_i = K_i (δ_i n_i − δ_com)` over the given legs.
/// Returns the penetrations, the body deflection (zero when pinned) and the
/// relative residual.
pub fn deflection_system(
    forces: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    stiffness: &[Matrix3<f64>],
    pin_com: bool,
) -> Result<(Vec<f64>, Vector3<f64>, f64)> {
    let directions: Vec<&[Vector3<f64>]> = normals.iter().map(std::slice::from_ref).collect();
    stacked_system(forces, &directions, stiffness, pin_com)
}

/// Least squares for `f_i = K_i (Σ_k z_ik u_ik − δ_com)` with the given
/// offset directions `u_ik` per leg.
fn stacked_system(
    forces: &[Vector3<f64>],
    directions: &[&[Vector3<f64>]],
    stiffness: &[Matrix3<f64>],
    pin_com: bool,
) -> Result<(Vec<f64>, Vector3<f64>, f64)> {
    let n = forces.len();
    let n_com = if pin_com { 0 } else { 3 };
    let n_z: usize = directions.iter().map(|d| d.len()).sum();
    let (rows, cols) = (3 * n, n_z + n_com);
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut b = DVector::<f64>::zeros(rows);
    let mut col = 0;
    for i in 0..n {
        for u in directions[i] {
            let ku = stiffness[i] * u;
            for r in 0..3 {
                a[(3 * i + r, col)] = ku[r];
            }
            col += 1;
        }
        for r in 0..3 {
            for c in 0..n_com {
                a[(3 * i + r, n_z + c)] = -stiffness[i][(r, c)];
            }
            b[3 * i + r] = forces[i][r];
        }
    }
    let z = if rows == 0 || b.norm() == 0.0 {
        DVector::zeros(cols)
    } else {
        a.clone().svd(true, true).solve(&b, 1e-12).map_err(|e| Error::InvalidProblem(e.to_string()))?
    };
    let b_norm = b.norm();
    let relative_residual = if b_norm > 0.0 { (&a * &z - &b).norm() / b_norm } else { 0.0 };
    if relative_residual > INCONSISTENCY_THRESHOLD {
        return Err(Error::InconsistentSystem { relative_residual });
    }
    let delta_com = if pin_com { Vector3::zeros() } else { Vector3::new(z[n_z], z[n_z + 1], z[n_z + 2]) };
    Ok((z.rows(0, n_z).iter().copied().collect(), delta_com, relative_residual))
}

/// Deflections of every round of a trajectory; rounds whose system cannot
/// be solved carry the error.
pub fn round_deflections(trajectory: &Trajectory, problem: &PlanProblem<f64>, options: &DeflectionOptions) -> Vec<Result<DeflectionCommand>> {
    trajectory.rounds.iter().map(|r| solve_deflections(r, &problem.robot, &problem.scene, options)).collect()
}

/// CSV header: time, body pose, toe positions, normal forces, toe offsets.
pub fn csv_header(n_legs: usize) -> Vec<String> {
    let name = |l: usize| LEG_NAMES.get(l).map(|s| s.to_string()).unwrap_or_else(|| format!("leg{l}"));
    let mut h: Vec<String> = ["time", "com_x", "com_y", "com_z", "roll", "pitch", "yaw"].iter().map(|s| s.to_string()).collect();
    for l in 0..n_legs {
        for a in ["x", "y", "z"] {
            h.push(format!("{}_toe_{a}", name(l)));
        }
    }
    h.extend((0..n_legs).map(|l| format!("{}_normal_force", name(l))));
    for l in 0..n_legs {
        for a in ["x", "y", "z"] {
            h.push(format!("{}_delta_wall_{a}", name(l)));
        }
    }
    h
}

/// Writes the sampled trajectory. Forces and offsets are those of the round
/// being moved to; offsets of rounds without a deflection solution are
/// written as `nan`.
pub fn write_csv<W: Write>(
    out: &mut W,
    trajectory: &Trajectory,
    deflections: &[Result<DeflectionCommand>],
    options: &TrajectoryOptions,
) -> std::io::Result<()> {
    let n_legs = trajectory.toes.len();
    writeln!(out, "{}", csv_header(n_legs).join(","))?;
    let m = trajectory.knots.len() - 1;
    let samples = m * options.samples_per_round;
    for k in 0..=samples {
        let t = if samples == 0 { 0.0 } else { trajectory.duration() * k as f64 / samples as f64 };
        let (c, e) = trajectory.body_at(t);
        let mut row: Vec<f64> = vec![t, c.x, c.y, c.z, e.x, e.y, e.z];
        for leg in 0..n_legs {
            row.extend(trajectory.toe_at(leg, t).iter());
        }
        let j = trajectory.active_round(t);
        row.extend(&trajectory.normal_forces[j]);
        match deflections.get(j) {
            Some(Ok(d)) => row.extend(d.delta_wall.iter().flat_map(|v| v.iter().copied())),
            _ => row.extend(std::iter::repeat_n(f64::NAN, 3 * n_legs)),
        }
        let text: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", text.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ScenarioParams;
    use crate::setup::standard_problem;
    use approx::assert_relative_eq;

    #[test]
    fn spline_reproduces_a_cubic_free_line() {
        let s = CubicSpline::natural(&[0.0, 1.0, 3.0, 4.0], &[1.0, 3.0, 7.0, 9.0]);
        for t in [0.0, 0.5, 2.0, 3.7, 4.0] {
            assert_relative_eq!(s.eval(t), 1.0 + 2.0 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn spline_is_twice_differentiable_at_knots() {
        let s = CubicSpline::natural(&[0.0, 1.0, 2.5, 3.0, 5.0], &[0.0, 2.0, -1.0, 0.5, 1.0]);
        let h = 1e-4;
        for &k in &s.knots[1..4] {
            let left = (s.eval(k) - s.eval(k - h)) / h;
            let right = (s.eval(k + h) - s.eval(k)) / h;
            assert!((left - right).abs() < 1e-2, "slope jump at {k}");
        }
        assert_eq!(s.curvature[0], 0.0);
        assert_eq!(s.curvature[4], 0.0);
    }

    #[test]
    fn single_round_without_motion_is_constant() {
        let p = standard_problem("flat_ground", &ScenarioParams::default()).unwrap();
        let traj = interpolate(&p, std::slice::from_ref(&p.initial_stance), &TrajectoryOptions::default()).unwrap();
        for t in [0.0, 1.3, 4.0] {
            let (c, e) = traj.body_at(t);
            assert_eq!(c, p.initial_stance.com);
            assert_eq!(e, p.initial_stance.body_euler);
            for leg in 0..6 {
                assert_eq!(traj.toe_at(leg, t), p.initial_stance.toes[leg]);
            }
        }
    }

    #[test]
    fn ground_to_wall_swing_lifts_along_the_blended_normal() {
        let p = standard_problem("parallel_wall", &ScenarioParams::default()).unwrap();
        let mut r1 = p.initial_stance.clone();
        r1.toes[0] = p.targets.toes[0];
        let traj = interpolate(&p, &[r1.clone()], &TrajectoryOptions::default()).unwrap();
        let ToeSegment::Swing { path, lift, normal, penetration } = &traj.toes[0][0] else { panic!("leg 0 swings") };
        assert_eq!(*lift, 0.05);
        assert!(*penetration <= 1e-6);
        let expected = Vector3::new(0.0, -1.0, 1.0).normalize();
        assert_relative_eq!(*normal, expected, epsilon = 1e-12);
        let a = p.initial_stance.toes[0];
        let b = r1.toes[0];
        assert_relative_eq!(path.eval(2.0), (a + b) * 0.5 + expected * 0.05, epsilon = 1e-12);
        assert_eq!(traj.toe_at(0, 0.0), a);
        assert_eq!(traj.toe_at(0, 4.0), b);
        for leg in 1..6 {
            for k in 0..=40 {
                assert_eq!(traj.toe_at(leg, k as f64 * 0.1), p.initial_stance.toes[leg]);
            }
        }
    }

    #[test]
    fn zero_forces_give_zero_deflections() {
        let p = standard_problem("parallel_wall", &ScenarioParams::default()).unwrap();
        let mut r = p.initial_stance.clone();
        r.forces.iter_mut().flatten().for_each(|f| *f = Vector3::zeros());
        let d = solve_deflections(&r, &p.robot, &p.scene, &DeflectionOptions::default()).unwrap();
        assert!(d.penetration.iter().all(|&v| v == 0.0));
        assert_eq!(d.delta_com, Vector3::zeros());
        assert_eq!(d.relative_residual, 0.0);
    }

    #[test]
    fn consistent_forces_are_reproduced() {
        let p = standard_problem("parallel_wall", &ScenarioParams::default()).unwrap();
        let mut r = p.initial_stance.clone();
        let angles = round_joint_angles(&r, &p.robot).unwrap();
        let delta_com = Vector3::new(0.001, -0.002, 0.0015);
        for leg in 0..6 {
            let k = vjm_leg_stiffness(&p.robot.legs[leg], &angles[leg], &p.robot.joint_stiffness).unwrap();
            // Two legs press on the walls so the body deflection is unique.
            let n = match leg {
                0 => -Vector3::y(),
                3 => Vector3::y(),
                _ => Vector3::z(),
            };
            let f = k * (n * (0.004 + 0.001 * leg as f64) - delta_com);
            r.forces[leg] = if n.z == 0.0 { vec![Vector3::zeros(), f] } else { vec![f, Vector3::zeros()] };
        }
        let d = solve_deflections(&r, &p.robot, &p.scene, &DeflectionOptions::default()).unwrap();
        assert_eq!(d.model, DeflectionModel::Normal);
        assert!(d.relative_residual < 1e-10);
        assert_relative_eq!(d.delta_com, delta_com, epsilon = 1e-10);
        for (leg, f) in d.reconstructed_forces().iter().enumerate() {
            assert_relative_eq!(*f, r.leg_force(leg), max_relative = 1e-8);
        }
    }

    #[test]
    fn friction_loads_fall_back_to_offset_vectors() {
        let p = standard_problem("parallel_wall", &ScenarioParams::default()).unwrap();
        let mut r = p.initial_stance.clone();
        for (leg, f) in r.forces.iter_mut().enumerate() {
            f[0] = Vector3::new(0.5 * leg as f64, -1.0, 16.0);
        }
        let normal = DeflectionOptions { model: DeflectionModel::Normal, ..Default::default() };
        assert!(solve_deflections(&r, &p.robot, &p.scene, &normal).is_err());
        let d = solve_deflections(&r, &p.robot, &p.scene, &DeflectionOptions::default()).unwrap();
        assert_eq!(d.model, DeflectionModel::Vector);
        assert!(d.relative_residual < 1e-10);
        for (leg, f) in d.reconstructed_forces().iter().enumerate() {
            assert_relative_eq!(*f, r.leg_force(leg), max_relative = 1e-8);
        }
        for leg in 0..6 {
            assert_relative_eq!(d.penetration[leg], d.normals[leg].dot(&d.delta_wall[leg]), epsilon = 1e-15);
        }
    }

    #[test]
    fn single_spring_with_pinned_body() {
        let k = Matrix3::identity() * 1000.0;
        let (pen, com, res) = deflection_system(&[Vector3::new(0.0, 0.0, 10.0)], &[Vector3::z()], &[k], true).unwrap();
        assert_relative_eq!(pen[0], 0.01, epsilon = 1e-15);
        assert_eq!(com, Vector3::zeros());
        assert!(res < 1e-15);
    }

    #[test]
    fn tangential_force_on_pinned_spring_is_inconsistent() {
        let k = Matrix3::identity() * 1000.0;
        let r = deflection_system(&[Vector3::new(10.0, 0.0, 10.0)], &[Vector3::z()], &[k], true);
        assert!(matches!(r, Err(Error::InconsistentSystem { .. })));
    }

    #[test]
    fn csv_has_fixed_columns() {
        let p = standard_problem("flat_ground", &ScenarioParams::default()).unwrap();
        let traj = interpolate(&p, std::slice::from_ref(&p.initial_stance), &TrajectoryOptions::default()).unwrap();
        let defl = round_deflections(&traj, &p, &DeflectionOptions::default());
        let mut buf = Vec::new();
        write_csv(&mut buf, &traj, &defl, &TrajectoryOptions::default()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 22);
        assert_eq!(lines[0].split(',').count(), 7 + 18 + 6 + 18);
        assert!(lines.iter().all(|l| l.split(',').count() == 49));
    }
}
