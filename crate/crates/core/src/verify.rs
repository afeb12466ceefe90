//! Independent checks of a plan: residual recomputation, an LP static
//! equilibrium oracle with pyramidal friction cones, and the contact
//! sequence labeler.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::formulation::{leg_normal_force, normal_tangential, PlanProblem, ResidualReport, RoundState};
use crate::geometry::euler_rotation;
use crate::kinematics::{RobotModel, LEG_NAMES};
use crate::lp::{find_feasible, Feasibility};
use crate::scene::{contact_frame, signed_distance, Scene};
use crate::solver::SolveResult;

/// One supporting toe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub leg: usize,
    pub surface: usize,
    pub position: Vector3<f64>,
}

/// A round with its forces stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stance {
    pub contacts: Vec<Contact>,
    pub com: Vector3<f64>,
    pub body_euler: Vector3<f64>,
}

impl Stance {
    /// Contacts of a round: pairs pushing with more than `force_floor` (N)
    /// while closer than `distance_threshold` (m) to their surface.
    pub fn from_round(round: &RoundState<f64>, scene: &Scene<f64>, force_floor: f64, distance_threshold: f64) -> Self {
        let mut contacts = Vec::new();
        for (leg, cands) in scene.candidate_map.iter().enumerate() {
            for (k, &s) in cands.iter().enumerate() {
                let surface = &scene.surfaces[s];
                let p = round.toes[leg];
                let (fz, _) = normal_tangential(&round.forces[leg][k], surface, &p);
                if fz > force_floor && signed_distance(surface, &p).abs() <= distance_threshold {
                    contacts.push(Contact { leg, surface: s, position: p });
                }
            }
        }
        Self { contacts, com: round.com, body_euler: round.body_euler }
    }

    /// Whether every contact lies inside its surface patch.
    pub fn within_regions(&self, scene: &Scene<f64>, tol: f64) -> bool {
        self.contacts.iter().all(|c| scene.surfaces[c.surface].region.contains(&c.position, tol))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleResult {
    /// Witness force per stance contact (world frame, N).
    Feasible(Vec<Vector3<f64>>),
    Infeasible,
}

impl OracleResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self, OracleResult::Feasible(_))
    }
}

pub const DEFAULT_PYRAMID_SIDES: usize = 8;

/// Linear feasibility test of static equilibrium: forces inside a pyramid
/// inscribed in each scaled friction cone, leg forces within the
/// conservative bound (body frame), balancing gravity and moments.
///
/// # Panics
/// If `pyramid_sides < 4`.
pub fn equilibrium_oracle(
    stance: &Stance,
    robot: &RobotModel<f64>,
    scene: &Scene<f64>,
    s_mu: f64,
    s_tau: f64,
    pyramid_sides: usize,
) -> OracleResult {
    equilibrium_oracle_with_slack(stance, robot, scene, s_mu, s_tau, pyramid_sides, 0.0)
}

/// [`equilibrium_oracle`] accepting a net wrench of up to `slack` per
/// component (force in body weights, moment in body weight times reach).
/// Stances balanced on a line or a single point are feasible only up to
/// the rounding of a numerical solution, which a zero slack rejects.
pub fn equilibrium_oracle_with_slack(
    stance: &Stance,
    robot: &RobotModel<f64>,
    scene: &Scene<f64>,
    s_mu: f64,
    s_tau: f64,
    pyramid_sides: usize,
    slack: f64,
) -> OracleResult {
    assert!(pyramid_sides >= 4, "pyramid needs at least four sides");
    let force = robot.mass * scene.gravity.norm();
    let length = robot.reach_radius;
    let bound = robot.force_bound(s_tau) / force;
    let rot = euler_rotation(&stance.body_euler);

    // Unit generators of every contact pyramid.
    let mut generators: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(stance.contacts.len());
    for c in &stance.contacts {
        let surface = &scene.surfaces[c.surface];
        let Ok(frame) = contact_frame(surface, &c.position) else {
            return OracleResult::Infeasible;
        };
        let (t1, t2, n) = (frame.row(0).transpose(), frame.row(1).transpose(), frame.row(2).transpose());
        let mu = surface.friction / s_mu * (1.0 - 1e-9);
        generators.push(
            (0..pyramid_sides)
                .map(|s| {
                    let phi = std::f64::consts::TAU * s as f64 / pyramid_sides as f64;
                    n + (t1 * phi.cos() + t2 * phi.sin()) * mu
                })
                .collect(),
        );
    }
    let n_vars = stance.contacts.len() * pyramid_sides;
    let col = |c: usize, s: usize| c * pyramid_sides + s;

    let mut a_eq = DMatrix::zeros(6, n_vars);
    let mut b_eq = DVector::zeros(6);
    let g = scene.gravity * robot.mass / force;
    for k in 0..3 {
        b_eq[k] = -g[k];
    }
    for (c, contact) in stance.contacts.iter().enumerate() {
        let r = (contact.position - stance.com) / length;
        for (s, gen) in generators[c].iter().enumerate() {
            let m = r.cross(gen);
            for k in 0..3 {
                a_eq[(k, col(c, s))] = gen[k];
                a_eq[(3 + k, col(c, s))] = m[k];
            }
        }
    }

    let mut legs: Vec<usize> = stance.contacts.iter().map(|c| c.leg).collect();
    legs.sort_unstable();
    legs.dedup();
    let mut a_ub = DMatrix::zeros(6 * legs.len(), n_vars);
    let b_ub = DVector::from_element(6 * legs.len(), bound);
    for (li, &leg) in legs.iter().enumerate() {
        for (c, contact) in stance.contacts.iter().enumerate() {
            if contact.leg != leg {
                continue;
            }
            for (s, gen) in generators[c].iter().enumerate() {
                let body = rot.transpose() * gen;
                for k in 0..3 {
                    a_ub[(6 * li + 2 * k, col(c, s))] = body[k];
                    a_ub[(6 * li + 2 * k + 1, col(c, s))] = -body[k];
                }
            }
        }
    }

    let (a_eq, b_eq, a_ub, b_ub) = if slack > 0.0 {
        // |A λ − b| ≤ slack as two inequality blocks.
        let rows = a_ub.nrows();
        let mut a = DMatrix::zeros(rows + 12, n_vars);
        let mut b = DVector::zeros(rows + 12);
        a.rows_mut(0, rows).copy_from(&a_ub);
        b.rows_mut(0, rows).copy_from(&b_ub);
        for k in 0..6 {
            a.row_mut(rows + k).copy_from(&a_eq.row(k));
            b[rows + k] = b_eq[k] + slack;
            a.row_mut(rows + 6 + k).copy_from(&(-a_eq.row(k)));
            b[rows + 6 + k] = slack - b_eq[k];
        }
        (DMatrix::zeros(0, n_vars), DVector::zeros(0), a, b)
    } else {
        (a_eq, b_eq, a_ub, b_ub)
    };
    match find_feasible(&a_eq, &b_eq, &a_ub, &b_ub) {
        Feasibility::Infeasible => OracleResult::Infeasible,
        Feasibility::Feasible(lambda) => OracleResult::Feasible(
            generators
                .iter()
                .enumerate()
                .map(|(c, gens)| gens.iter().enumerate().map(|(s, gen)| gen * lambda[col(c, s)]).sum::<Vector3<f64>>() * force)
                .collect(),
        ),
    }
}

/// Static support forces for a round whose toes are placed: the
/// minimum-norm equilibrium distribution over touching pairs when it lies in
/// the scaled cones and force bound, the oracle witness otherwise.
/// Returns forces indexed `[leg][candidate]`.
pub fn support_forces(
    round: &RoundState<f64>,
    robot: &RobotModel<f64>,
    scene: &Scene<f64>,
    s_mu: f64,
    s_tau: f64,
) -> Option<Vec<Vec<Vector3<f64>>>> {
    const TOUCH: f64 = 1e-6;
    let mut pairs = Vec::new();
    for (leg, cands) in scene.candidate_map.iter().enumerate() {
        for (k, &s) in cands.iter().enumerate() {
            let surface = &scene.surfaces[s];
            let p = round.toes[leg];
            if signed_distance(surface, &p).abs() <= TOUCH && surface.region.contains(&p, TOUCH) {
                pairs.push((leg, k, s));
            }
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let weight = robot.mass * scene.gravity.norm();
    let mut a = DMatrix::zeros(6, 3 * pairs.len());
    for (c, &(leg, _, _)) in pairs.iter().enumerate() {
        let r = round.toes[leg] - round.com;
        for k in 0..3 {
            a[(k, 3 * c + k)] = 1.0;
        }
        let sk = crate::geometry::skew(&r);
        for u in 0..3 {
            for v in 0..3 {
                a[(3 + u, 3 * c + v)] = sk[(u, v)];
            }
        }
    }
    let mut b = DVector::zeros(6);
    for k in 0..3 {
        b[k] = -scene.gravity[k] * robot.mass;
    }
    let mut forces: Vec<Vec<Vector3<f64>>> = scene.candidate_map.iter().map(|c| vec![Vector3::zeros(); c.len()]).collect();
    let min_norm = a.clone().svd(true, true).solve(&b, 1e-12).ok();
    let bound = robot.force_bound(s_tau);
    let rot = euler_rotation(&round.body_euler);
    if let Some(f) = min_norm.filter(|f| (&a * f - &b).norm() <= 1e-9 * weight) {
        let mut ok = true;
        for (c, &(leg, k, s)) in pairs.iter().enumerate() {
            let fc = Vector3::new(f[3 * c], f[3 * c + 1], f[3 * c + 2]);
            let surface = &scene.surfaces[s];
            let (fz, ft) = normal_tangential(&fc, surface, &round.toes[leg]);
            ok &= fz >= 0.0 && ft <= surface.friction / s_mu * fz && (rot.transpose() * fc).amax() <= bound;
            forces[leg][k] = fc;
        }
        if ok {
            return Some(forces);
        }
    }
    let stance = Stance {
        contacts: pairs.iter().map(|&(leg, _, s)| Contact { leg, surface: s, position: round.toes[leg] }).collect(),
        com: round.com,
        body_euler: round.body_euler,
    };
    // Bisect on the force-bound scale for the witness with the smallest
    // largest component.
    let mut best = equilibrium_oracle(&stance, robot, scene, s_mu, s_tau, DEFAULT_PYRAMID_SIDES);
    if best.is_feasible() {
        let (mut lo, mut hi) = (s_tau, s_tau * 1e3);
        for _ in 0..30 {
            let mid = (lo * hi).sqrt();
            match equilibrium_oracle(&stance, robot, scene, s_mu, mid, DEFAULT_PYRAMID_SIDES) {
                r @ OracleResult::Feasible(_) => {
                    best = r;
                    lo = mid;
                }
                OracleResult::Infeasible => hi = mid,
            }
            if hi / lo < 1.01 {
                break;
            }
        }
    }
    match best {
        OracleResult::Feasible(w) => {
            for row in forces.iter_mut() {
                row.fill(Vector3::zeros());
            }
            for (&(leg, k, _), f) in pairs.iter().zip(w) {
                forces[leg][k] = f;
            }
            Some(forces)
        }
        OracleResult::Infeasible => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Largest accepted normalized residual.
    pub residual: f64,
    /// Normal force (N) above which a contact counts as supporting.
    pub force_threshold: f64,
    /// Distance (m) below which a toe counts as touching.
    pub distance_threshold: f64,
    pub pyramid_sides: usize,
    /// Net wrench the oracle tolerates (normalized).
    pub equilibrium_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual: 1e-4,
            force_threshold: 0.5,
            distance_threshold: 0.005,
            pyramid_sides: DEFAULT_PYRAMID_SIDES,
            equilibrium_slack: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCheck {
    pub report: ResidualReport,
    /// Oracle verdict for rounds `1..=M`.
    pub oracle_feasible: Vec<bool>,
}

impl SolutionCheck {
    pub fn passed(&self, tol: &Tolerances) -> bool {
        self.report.max() <= tol.residual && self.oracle_feasible.iter().all(|&f| f)
    }
}

/// Recomputes every residual family and runs the oracle on each round's
/// active contact set.
pub fn check_rounds(problem: &PlanProblem<f64>, rounds: &[RoundState<f64>], tol: &Tolerances) -> SolutionCheck {
    let report = ResidualReport::compute(problem, rounds);
    let floor = 1e-6 * problem.force_scale();
    let oracle_feasible = rounds
        .iter()
        .map(|round| {
            let stance = Stance::from_round(round, &problem.scene, floor, tol.distance_threshold);
            equilibrium_oracle_with_slack(
                &stance,
                &problem.robot,
                &problem.scene,
                problem.s_mu,
                problem.s_tau,
                tol.pyramid_sides,
                tol.equilibrium_slack,
            )
                .is_feasible()
        })
        .collect();
    SolutionCheck { report, oracle_feasible }
}

pub fn check_solution(result: &SolveResult, problem: &PlanProblem<f64>, tol: &Tolerances) -> SolutionCheck {
    check_rounds(problem, &result.rounds, tol)
}

/// A normal force close enough to the labeling threshold to make the
/// contact indicator unreliable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousContact {
    pub round: usize,
    pub leg: usize,
    pub surface: usize,
    pub normal_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLabel {
    /// Legs moved in each round `1..=M`.
    pub moved: Vec<Vec<usize>>,
    /// Dash-joined moved counts of the rounds in which anything moved, or
    /// `"0"` for an idle plan.
    pub text: String,
    pub ambiguous: Vec<AmbiguousContact>,
}

impl SequenceLabel {
    pub fn from_moved(moved: Vec<Vec<usize>>) -> Self {
        let counts: Vec<String> = moved.iter().filter(|m| !m.is_empty()).map(|m| m.len().to_string()).collect();
        let text = if counts.is_empty() { "0".to_string() } else { counts.join("-") };
        Self { moved, text, ambiguous: Vec::new() }
    }

    /// Leg names moved per round, e.g. `[["LF", "RM", "LR"], ...]`.
    pub fn moved_names(&self) -> Vec<Vec<&'static str>> {
        self.moved.iter().map(|m| m.iter().map(|&l| LEG_NAMES.get(l).copied().unwrap_or("?")).collect()).collect()
    }
}

impl std::fmt::Display for SequenceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// Names a plan by the legs it lifts: a leg moves in round `j` when its
/// contact indicator (some candidate with `f_z > force_threshold` and
/// `d < distance_threshold`) switches off between rounds `j − 1` and `j`.
pub fn label_rounds(
    problem: &PlanProblem<f64>,
    rounds: &[RoundState<f64>],
    force_threshold: f64,
    distance_threshold: f64,
) -> SequenceLabel {
    assert!(force_threshold > 0.0 && distance_threshold > 0.0, "thresholds must be positive");
    let scene = &problem.scene;
    let mut ambiguous = Vec::new();
    let mut indicator = |j: usize, round: &RoundState<f64>| -> Vec<bool> {
        scene
            .candidate_map
            .iter()
            .enumerate()
            .map(|(leg, cands)| {
                let mut active = false;
                for (k, &s) in cands.iter().enumerate() {
                    let surface = &scene.surfaces[s];
                    let p = round.toes[leg];
                    let (fz, _) = normal_tangential(&round.forces[leg][k], surface, &p);
                    if (fz - force_threshold).abs() <= 0.2 * force_threshold {
                        ambiguous.push(AmbiguousContact { round: j, leg, surface: s, normal_force: fz });
                    }
                    active |= fz > force_threshold && signed_distance(surface, &p) < distance_threshold;
                }
                active
            })
            .collect()
    };
    let mut prev = indicator(0, &problem.initial_stance);
    let mut moved = Vec::with_capacity(rounds.len());
    for (j, round) in rounds.iter().enumerate() {
        let now = indicator(j + 1, round);
        moved.push((0..now.len()).filter(|&l| prev[l] && !now[l]).collect());
        prev = now;
    }
    let mut label = SequenceLabel::from_moved(moved);
    label.ambiguous = ambiguous;
    label
}

pub fn label_sequence(
    result: &SolveResult,
    problem: &PlanProblem<f64>,
    force_threshold: f64,
    distance_threshold: f64,
) -> SequenceLabel {
    label_rounds(problem, &result.rounds, force_threshold, distance_threshold)
}

/// Per round and leg, the summed normal force (N); row 0 is the initial
/// stance.
pub fn normal_force_table(problem: &PlanProblem<f64>, rounds: &[RoundState<f64>]) -> Vec<Vec<f64>> {
    std::iter::once(&problem.initial_stance)
        .chain(rounds)
        .map(|r| (0..problem.n_legs()).map(|leg| leg_normal_force(r, &problem.scene, leg)).collect())
        .collect()
}
