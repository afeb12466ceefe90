//! Flat-vector nonlinear program with a sparse analytic Jacobian.
//!
//! Variables are stored per round (`1..=M`) in blocks:
//!
//! | slot          | size          | scale        |
//! |---------------|---------------|--------------|
//! | COM           | 3             | reach radius |
//! | body Euler    | 3             | 1            |
//! | toes          | 3 per leg     | reach radius |
//! | forces        | 3 per pair    | `m‖g‖`       |
//! | joint angles  | dof per leg   | 1 (exact)    |
//!
//! Pairs are (leg, candidate surface) in leg-major order. Constraints are
//! `g(x) = 0` or `g(x) ≤ 0` in normalized units, emitted round by round so
//! round `j` couples only to round `j − 1`.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{ForceCost, KinematicsMode, PlanProblem, RoundState, L1_SMOOTHING};
use crate::error::{Error, Result};
use crate::geometry::{euler_rotation, euler_rotation_derivatives, skew};
use crate::kinematics::{jacobian, jacobian_derivatives};
use crate::scene::{contact_frame_jacobians, frame_from_normal, signed_distance, HalfSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    EquilibriumForce,
    EquilibriumMoment,
    Reachability,
    ForwardKinematics,
    Torque,
    ForceBound,
    StepSize,
    Unilateral,
    FrictionCone,
    Nonpenetration,
    Complementarity,
    Region,
    Switchability,
    StanceHold,
    KeepOut,
    Terminal,
}

impl ConstraintFamily {
    /// Families that couple forces to contact distances; relaxed by the
    /// homotopy and dropped from the warm-start problem.
    pub fn is_complementarity(self) -> bool {
        matches!(self, Self::Complementarity | Self::Region | Self::Switchability | Self::StanceHold | Self::KeepOut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintInfo {
    pub family: ConstraintFamily,
    pub equality: bool,
    pub round: usize,
    pub leg: Option<usize>,
}

/// Which constraint families are emitted, and the complementarity
/// relaxation (normalized units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpConfig {
    pub relax: f64,
    pub complementarity: bool,
    pub switchability: bool,
    pub stance_hold: bool,
    pub terminal: bool,
    /// Smoothing width of the L1 force cost (N).
    pub l1_smoothing: f64,
}

impl NlpConfig {
    /// The full problem at a given relaxation.
    pub fn full(problem: &PlanProblem<f64>, relax: f64) -> Self {
        Self {
            relax,
            complementarity: true,
            switchability: problem.switchability,
            stance_hold: true,
            terminal: true,
            l1_smoothing: L1_SMOOTHING,
        }
    }

    /// Without any complementarity-type family.
    pub fn relaxed() -> Self {
        Self {
            relax: 0.0,
            complementarity: false,
            switchability: false,
            stance_hold: false,
            terminal: true,
            l1_smoothing: L1_SMOOTHING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub leg: usize,
    pub candidate: usize,
    pub surface: usize,
}

/// Index arithmetic for the flat variable vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub rounds: usize,
    pub n_legs: usize,
    pub pairs: Vec<Pair>,
    pub leg_pairs: Vec<Range<usize>>,
    /// Joint counts per leg; empty in sphere mode.
    pub dofs: Vec<usize>,
    joint_offsets: Vec<usize>,
    pub block: usize,
    pub length_scale: f64,
    pub force_scale: f64,
    pub scales: Vec<f64>,
}

impl Layout {
    pub fn new(problem: &PlanProblem<f64>) -> Self {
        let n_legs = problem.n_legs();
        let mut pairs = Vec::new();
        let mut leg_pairs = Vec::new();
        for (leg, cands) in problem.scene.candidate_map.iter().enumerate() {
            let start = pairs.len();
            for (candidate, &surface) in cands.iter().enumerate() {
                pairs.push(Pair { leg, candidate, surface });
            }
            leg_pairs.push(start..pairs.len());
        }
        let dofs: Vec<usize> = match problem.kinematics_mode {
            KinematicsMode::Sphere => Vec::new(),
            KinematicsMode::Exact => problem.robot.legs.iter().map(|l| l.dof()).collect(),
        };
        let mut joint_offsets = Vec::with_capacity(dofs.len());
        let mut acc = 0;
        for d in &dofs {
            joint_offsets.push(acc);
            acc += d;
        }
        let block = 6 + 3 * n_legs + 3 * pairs.len() + acc;
        let length_scale = problem.length_scale();
        let force_scale = problem.force_scale();
        let mut layout = Self {
            rounds: problem.rounds,
            n_legs,
            pairs,
            leg_pairs,
            dofs,
            joint_offsets,
            block,
            length_scale,
            force_scale,
            scales: Vec::new(),
        };
        let mut block_scales = vec![1.0; block];
        block_scales[0..3].fill(length_scale);
        let f0 = layout.force_local(0);
        block_scales[6..f0].fill(length_scale);
        block_scales[f0..f0 + 3 * layout.pairs.len()].fill(force_scale);
        layout.scales = (0..layout.rounds).flat_map(|_| block_scales.iter().copied()).collect();
        layout
    }

    pub fn n_vars(&self) -> usize {
        self.block * self.rounds
    }

    fn force_local(&self, pair: usize) -> usize {
        6 + 3 * self.n_legs + 3 * pair
    }

    fn at(&self, round: usize, local: usize) -> Option<usize> {
        (round > 0).then(|| (round - 1) * self.block + local)
    }

    pub fn com(&self, round: usize) -> Option<usize> {
        self.at(round, 0)
    }

    pub fn euler(&self, round: usize) -> Option<usize> {
        self.at(round, 3)
    }

    pub fn toe(&self, round: usize, leg: usize) -> Option<usize> {
        self.at(round, 6 + 3 * leg)
    }

    pub fn force(&self, round: usize, pair: usize) -> Option<usize> {
        self.at(round, self.force_local(pair))
    }

    pub fn joints(&self, round: usize, leg: usize) -> Option<usize> {
        self.at(round, 6 + 3 * self.n_legs + 3 * self.pairs.len() + self.joint_offsets[leg])
    }

    /// Round of a variable index (1-based).
    pub fn round_of(&self, index: usize) -> usize {
        index / self.block + 1
    }

    /// Packs rounds `1..=M` into a scaled vector.
    pub fn pack(&self, rounds: &[RoundState<f64>]) -> DVector<f64> {
        assert_eq!(rounds.len(), self.rounds);
        let mut x = DVector::zeros(self.n_vars());
        for (r, s) in rounds.iter().enumerate() {
            let j = r + 1;
            put(&mut x, self.com(j).unwrap(), &(s.com / self.length_scale));
            put(&mut x, self.euler(j).unwrap(), &s.body_euler);
            for leg in 0..self.n_legs {
                put(&mut x, self.toe(j, leg).unwrap(), &(s.toes[leg] / self.length_scale));
            }
            for (p, pair) in self.pairs.iter().enumerate() {
                put(&mut x, self.force(j, p).unwrap(), &(s.forces[pair.leg][pair.candidate] / self.force_scale));
            }
            if !self.dofs.is_empty() {
                let angles = s.joint_angles.as_ref().expect("joint angles in exact mode");
                for leg in 0..self.n_legs {
                    let o = self.joints(j, leg).unwrap();
                    for k in 0..self.dofs[leg] {
                        x[o + k] = angles[leg][k];
                    }
                }
            }
        }
        x
    }

    /// Unpacks a scaled vector into rounds `1..=M`.
    pub fn unpack(&self, x: &DVector<f64>, problem: &PlanProblem<f64>) -> Vec<RoundState<f64>> {
        (1..=self.rounds).map(|j| self.unpack_round(x, j, problem)).collect()
    }

    fn unpack_round(&self, x: &DVector<f64>, j: usize, problem: &PlanProblem<f64>) -> RoundState<f64> {
        let l = self.length_scale;
        let com = get(x, self.com(j).unwrap()) * l;
        let euler = get(x, self.euler(j).unwrap());
        let toes = (0..self.n_legs).map(|leg| get(x, self.toe(j, leg).unwrap()) * l).collect();
        let mut s = RoundState::unloaded(com, euler, toes, &problem.scene);
        for (p, pair) in self.pairs.iter().enumerate() {
            s.forces[pair.leg][pair.candidate] = get(x, self.force(j, p).unwrap()) * self.force_scale;
        }
        if !self.dofs.is_empty() {
            s.joint_angles = Some(
                (0..self.n_legs)
                    .map(|leg| {
                        let o = self.joints(j, leg).unwrap();
                        (0..self.dofs[leg]).map(|k| x[o + k]).collect()
                    })
                    .collect(),
            );
        }
        s
    }
}

fn put(x: &mut DVector<f64>, at: usize, v: &Vector3<f64>) {
    x[at] = v.x;
    x[at + 1] = v.y;
    x[at + 2] = v.z;
}

fn get(x: &DVector<f64>, at: usize) -> Vector3<f64> {
    Vector3::new(x[at], x[at + 1], x[at + 2])
}

/// Collects constraint values and Jacobian triplets in emission order.
struct Sink<'s> {
    scales: &'s [f64],
    g: Vec<f64>,
    vals: Vec<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    info: Vec<ConstraintInfo>,
    row_scale: f64,
    jac: bool,
    record: bool,
}

impl<'s> Sink<'s> {
    fn new(scales: &'s [f64], jac: bool, record: bool) -> Self {
        Self {
            scales,
            g: Vec::new(),
            vals: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
            info: Vec::new(),
            row_scale: 1.0,
            jac,
            record,
        }
    }

    /// Starts a row with physical value `value` and normalization `scale`.
    fn row(&mut self, value: f64, scale: f64, info: ConstraintInfo) {
        self.g.push(value / scale);
        self.row_scale = scale;
        if self.record {
            self.info.push(info);
        }
    }

    /// Adds the physical partial derivative with respect to variable `col`.
    fn d(&mut self, col: Option<usize>, value: f64) {
        let Some(col) = col else { return };
        if self.jac {
            self.vals.push(value * self.scales[col] / self.row_scale);
        }
        if self.record {
            self.rows.push(self.g.len() - 1);
            self.cols.push(col);
        }
    }

    fn d3(&mut self, base: Option<usize>, grad: &Vector3<f64>) {
        for k in 0..3 {
            self.d(base.map(|b| b + k), grad[k]);
        }
    }
}

#[derive(Debug, Clone)]
struct PairData {
    /// Facet coefficient `μ cos(π/k)` of the inscribed pyramid.
    mu_facet: f64,
    solid: bool,
    curved: bool,
    region: Vec<HalfSpace<f64>>,
}

/// Result of [`NlpInstance::derivative_errors`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DerivativeErrors {
    pub jacobian: f64,
    pub gradient: f64,
}

impl DerivativeErrors {
    pub fn max(&self) -> f64 {
        self.jacobian.max(self.gradient)
    }
}

/// The assembled program for one problem and configuration.
#[derive(Debug, Clone)]
pub struct NlpInstance<'a> {
    pub problem: &'a PlanProblem<f64>,
    pub layout: Layout,
    pub config: NlpConfig,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub info: Vec<ConstraintInfo>,
    pub jac_rows: Vec<usize>,
    pub jac_cols: Vec<usize>,
    pair_data: Vec<PairData>,
    force_bound: f64,
    modes: Option<Vec<Vec<bool>>>,
    force_weights: Option<Vec<Vec<f64>>>,
}

/// Sides of the friction pyramid inscribed in each scaled cone.
pub const FRICTION_FACETS: usize = 8;

/// Bound on each scaled force component (multiples of the body weight).
const FORCE_VARIABLE_BOUND: f64 = 10.0;

impl<'a> NlpInstance<'a> {
    pub fn new(problem: &'a PlanProblem<f64>, config: NlpConfig) -> Result<Self> {
        problem.validate()?;
        if !(config.relax >= 0.0) || !(config.l1_smoothing > 0.0) {
            return Err(Error::InvalidProblem("relaxation must be nonnegative and smoothing positive".into()));
        }
        let layout = Layout::new(problem);
        let n = layout.n_vars();
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        for j in 1..=layout.rounds {
            let e = layout.euler(j).unwrap();
            for k in 0..3 {
                lower[e + k] = -std::f64::consts::PI;
                upper[e + k] = std::f64::consts::PI;
            }
            for p in 0..layout.pairs.len() {
                let f = layout.force(j, p).unwrap();
                for k in 0..3 {
                    lower[f + k] = -FORCE_VARIABLE_BOUND;
                    upper[f + k] = FORCE_VARIABLE_BOUND;
                }
            }
            if !layout.dofs.is_empty() {
                for (leg, chain) in problem.robot.legs.iter().enumerate() {
                    let o = layout.joints(j, leg).unwrap();
                    for (k, joint) in chain.joints.iter().enumerate() {
                        lower[o + k] = joint.min;
                        upper[o + k] = joint.max;
                    }
                }
            }
        }
        let pair_data = layout
            .pairs
            .iter()
            .map(|p| {
                let s = &problem.scene.surfaces[p.surface];
                let mu = problem.effective_friction(p.surface);
                PairData {
                    mu_facet: mu * (std::f64::consts::PI / FRICTION_FACETS as f64).cos(),
                    solid: s.solid,
                    curved: s.kind != crate::scene::SurfaceKind::Plane,
                    region: s.region.normalized().rows,
                }
            })
            .collect();
        let mut nlp = Self {
            problem,
            layout,
            config,
            lower,
            upper,
            info: Vec::new(),
            jac_rows: Vec::new(),
            jac_cols: Vec::new(),
            pair_data,
            force_bound: problem.force_bound(),
            modes: None,
            force_weights: None,
        };
        let x0 = nlp.clamp(&DVector::zeros(n));
        let mut sink = Sink::new(&nlp.layout.scales, false, true);
        nlp.emit(&x0, &mut sink);
        let (info, rows, cols) = (sink.info, sink.rows, sink.cols);
        nlp.info = info;
        nlp.jac_rows = rows;
        nlp.jac_cols = cols;
        Ok(nlp)
    }

    /// The program restricted to one contact mode: `loaded[j − 1][pair]`
    /// says whether the pair carries force in round `j`. Unloaded pairs have
    /// their forces fixed at zero; loaded pairs touch their surface inside
    /// the patch and loaded toes stay put, all as smooth constraints.
    pub fn with_modes(problem: &'a PlanProblem<f64>, config: NlpConfig, loaded: Vec<Vec<bool>>) -> Result<Self> {
        let mut nlp = Self::new(problem, config)?;
        if loaded.len() != nlp.layout.rounds || loaded.iter().any(|r| r.len() != nlp.layout.pairs.len()) {
            return Err(Error::InvalidProblem("contact mode must list every pair of every round".into()));
        }
        for (r, row) in loaded.iter().enumerate() {
            for (p, &on) in row.iter().enumerate() {
                if !on {
                    let f = nlp.layout.force(r + 1, p).unwrap();
                    for k in 0..3 {
                        nlp.lower[f + k] = 0.0;
                        nlp.upper[f + k] = 0.0;
                    }
                }
            }
        }
        nlp.modes = Some(loaded);
        let x0 = nlp.clamp(&DVector::zeros(nlp.n_vars()));
        let mut sink = Sink::new(&nlp.layout.scales, false, true);
        nlp.emit(&x0, &mut sink);
        nlp.info = sink.info;
        nlp.jac_rows = sink.rows;
        nlp.jac_cols = sink.cols;
        Ok(nlp)
    }

    /// Multiplies the force cost of each pair in round `j` by
    /// `factors[j − 1][pair]`.
    pub fn with_force_weights(mut self, factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.len() != self.layout.rounds || factors.iter().any(|r| r.len() != self.layout.pairs.len()) {
            return Err(Error::InvalidProblem("force weights must list every pair of every round".into()));
        }
        if factors.iter().flatten().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidProblem("force weights must be nonnegative".into()));
        }
        self.force_weights = Some(factors);
        Ok(self)
    }

    pub fn modes(&self) -> Option<&[Vec<bool>]> {
        self.modes.as_deref()
    }

    pub fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }

    pub fn n_constraints(&self) -> usize {
        self.info.len()
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().enumerate().map(|(i, &v)| v.max(self.lower[i]).min(self.upper[i])))
    }

    /// All rounds including the fixed round 0.
    pub fn states(&self, x: &DVector<f64>) -> Vec<RoundState<f64>> {
        let mut v = Vec::with_capacity(self.layout.rounds + 1);
        v.push(self.problem.initial_stance.clone());
        v.extend(self.layout.unpack(x, self.problem));
        v
    }

    pub fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut sink = Sink::new(&self.layout.scales, false, false);
        self.emit(x, &mut sink);
        DVector::from_vec(sink.g)
    }

    /// Constraint values and Jacobian values aligned with
    /// `jac_rows`/`jac_cols`.
    pub fn constraints_and_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let mut sink = Sink::new(&self.layout.scales, true, false);
        self.emit(x, &mut sink);
        debug_assert_eq!(sink.vals.len(), self.jac_rows.len());
        (DVector::from_vec(sink.g), sink.vals)
    }

    pub fn dense_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (_, vals) = self.constraints_and_jacobian(x);
        let mut j = DMatrix::zeros(self.n_constraints(), self.n_vars());
        for ((&r, &c), v) in self.jac_rows.iter().zip(&self.jac_cols).zip(vals) {
            j[(r, c)] += v;
        }
        j
    }

    /// Constraint violation per row: `|g|` for equalities, `max(g, 0)`
    /// otherwise.
    pub fn violations(&self, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            g.len(),
            g.iter().zip(&self.info).map(|(&v, i)| if i.equality { v.abs() } else { v.max(0.0) }),
        )
    }

    fn emit(&self, x: &DVector<f64>, sink: &mut Sink) {
        let states = self.states(x);
        for j in 1..=self.layout.rounds {
            self.emit_round(&states, j, sink);
        }
    }

    fn emit_round(&self, states: &[RoundState<f64>], j: usize, sink: &mut Sink) {
        let lay = &self.layout;
        let problem = self.problem;
        let robot = &problem.robot;
        let scene = &problem.scene;
        let (fs, ls) = (lay.force_scale, lay.length_scale);
        let s = &states[j];
        let prev = &states[j - 1];
        let info = |family, equality, leg| ConstraintInfo { family, equality, round: j, leg };

        // Contact normals and their derivatives per pair.
        let normals: Vec<(Vector3<f64>, Matrix3<f64>)> = lay
            .pairs
            .iter()
            .map(|p| {
                let surf = &scene.surfaces[p.surface];
                let pt = s.toes[p.leg];
                (surf.normal_at(&pt).unwrap_or(Vector3::zeros()), surf.normal_jacobian(&pt))
            })
            .collect();
        let force_of = |st: &RoundState<f64>, p: usize| st.forces[lay.pairs[p].leg][lay.pairs[p].candidate];

        // Equilibrium.
        let total: Vector3<f64> = lay.pairs.iter().enumerate().map(|(p, _)| force_of(s, p)).sum();
        let gravity = scene.gravity * robot.mass;
        for k in 0..3 {
            sink.row(total[k] + gravity[k], fs, info(ConstraintFamily::EquilibriumForce, true, None));
            for p in 0..lay.pairs.len() {
                sink.d(lay.force(j, p).map(|b| b + k), 1.0);
            }
        }
        let leg_forces: Vec<Vector3<f64>> = (0..lay.n_legs).map(|leg| s.leg_force(leg)).collect();
        let moment: Vector3<f64> =
            (0..lay.n_legs).map(|leg| (s.toes[leg] - s.com).cross(&leg_forces[leg])).sum();
        let sk_total = skew(&total);
        for k in 0..3 {
            sink.row(moment[k], fs * ls, info(ConstraintFamily::EquilibriumMoment, true, None));
            sink.d3(lay.com(j), &sk_total.row(k).transpose());
            for leg in 0..lay.n_legs {
                sink.d3(lay.toe(j, leg), &(-skew(&leg_forces[leg]).row(k).transpose()));
                let sk_r = skew(&(s.toes[leg] - s.com));
                for p in lay.leg_pairs[leg].clone() {
                    sink.d3(lay.force(j, p), &sk_r.row(k).transpose());
                }
            }
        }

        // Kinematics and actuation limits.
        let rot = euler_rotation(&s.body_euler);
        let drot = euler_rotation_derivatives(&s.body_euler);
        match problem.kinematics_mode {
            KinematicsMode::Sphere => {
                for (leg, chain) in robot.legs.iter().enumerate() {
                    let v = chain.hip_offset;
                    let h = s.toes[leg] - s.com - rot * v;
                    let r = robot.leg_reach(leg);
                    sink.row(h.norm_squared() - r * r, ls * ls, info(ConstraintFamily::Reachability, false, Some(leg)));
                    sink.d3(lay.com(j), &(-2.0 * h));
                    let de = Vector3::from_fn(|m, _| -2.0 * h.dot(&(drot[m] * v)));
                    sink.d3(lay.euler(j), &de);
                    sink.d3(lay.toe(j, leg), &(2.0 * h));
                }
                for leg in 0..lay.n_legs {
                    let fb = rot.transpose() * leg_forces[leg];
                    for k in 0..3 {
                        for sign in [1.0, -1.0] {
                            sink.row(sign * fb[k] - self.force_bound, fs, info(ConstraintFamily::ForceBound, false, Some(leg)));
                            let de = Vector3::from_fn(|m, _| sign * (drot[m].transpose() * leg_forces[leg])[k]);
                            sink.d3(lay.euler(j), &de);
                            let df = rot.column(k) * sign;
                            for p in lay.leg_pairs[leg].clone() {
                                sink.d3(lay.force(j, p), &df);
                            }
                        }
                    }
                }
            }
            KinematicsMode::Exact => {
                let angles = s.joint_angles.as_ref().expect("joint angles in exact mode");
                for (leg, chain) in robot.legs.iter().enumerate() {
                    let th = &angles[leg];
                    let q = chain.toe_in_body(th);
                    let jb = jacobian(chain, th);
                    let e = s.toes[leg] - s.com - rot * q;
                    let rj = rot * &jb;
                    for k in 0..3 {
                        sink.row(e[k], ls, info(ConstraintFamily::ForwardKinematics, true, Some(leg)));
                        sink.d(lay.com(j).map(|b| b + k), -1.0);
                        let de = Vector3::from_fn(|m, _| -(drot[m] * q)[k]);
                        sink.d3(lay.euler(j), &de);
                        sink.d(lay.toe(j, leg).map(|b| b + k), 1.0);
                        let o = lay.joints(j, leg);
                        for m in 0..th.len() {
                            sink.d(o.map(|b| b + m), -rj[(k, m)]);
                        }
                    }
                    let fb = rot.transpose() * leg_forces[leg];
                    let tau = jb.transpose() * fb;
                    let djs = jacobian_derivatives(chain, th);
                    for k in 0..th.len() {
                        let limit = robot.joint_torque_limits.as_ref().map_or(robot.torque_limit, |l| l[k]);
                        for sign in [1.0, -1.0] {
                            // Dimensionless: τ_k / τ_limit − 1/S_τ.
                            sink.row(sign * tau[k] / limit - 1.0 / problem.s_tau, 1.0, info(ConstraintFamily::Torque, false, Some(leg)));
                            let de = Vector3::from_fn(|m, _| sign * jb.column(k).dot(&(drot[m].transpose() * leg_forces[leg])) / limit);
                            sink.d3(lay.euler(j), &de);
                            let df = rot * jb.column(k) * (sign / limit);
                            for p in lay.leg_pairs[leg].clone() {
                                sink.d3(lay.force(j, p), &df);
                            }
                            let o = lay.joints(j, leg);
                            for m in 0..th.len() {
                                sink.d(o.map(|b| b + m), sign * djs[m].column(k).dot(&fb) / limit);
                            }
                        }
                    }
                }
            }
        }

        // Step-size boxes.
        let dc = s.com - prev.com;
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                sink.row(sign * dc[k] - robot.max_body_step[k], ls, info(ConstraintFamily::StepSize, false, None));
                sink.d(lay.com(j).map(|b| b + k), sign);
                sink.d(lay.com(j - 1).map(|b| b + k), -sign);
            }
        }
        let de = s.body_euler - prev.body_euler;
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                sink.row(sign * de[k] - robot.max_body_rotation_step[k], 1.0, info(ConstraintFamily::StepSize, false, None));
                sink.d(lay.euler(j).map(|b| b + k), sign);
                sink.d(lay.euler(j - 1).map(|b| b + k), -sign);
            }
        }
        for leg in 0..lay.n_legs {
            let dp = s.toes[leg] - prev.toes[leg];
            for k in 0..3 {
                for sign in [1.0, -1.0] {
                    sink.row(sign * dp[k] - robot.toe_step(leg), ls, info(ConstraintFamily::StepSize, false, Some(leg)));
                    sink.d(lay.toe(j, leg).map(|b| b + k), sign);
                    sink.d(lay.toe(j - 1, leg).map(|b| b + k), -sign);
                }
            }
        }

        // Contact pairs.
        let relax_fl = self.config.relax * fs * ls;
        for (p, pair) in lay.pairs.iter().enumerate() {
            let data = &self.pair_data[p];
            let surf = &scene.surfaces[pair.surface];
            let (n, dn) = normals[p];
            let f = force_of(s, p);
            let pt = s.toes[pair.leg];
            let fz = n.dot(&f);
            let dfz_dp = dn * f;
            let fcol = lay.force(j, p);
            let tcol = lay.toe(j, pair.leg);
            let leg = Some(pair.leg);

            sink.row(-fz, fs, info(ConstraintFamily::Unilateral, false, leg));
            sink.d3(fcol, &(-n));
            if data.curved {
                sink.d3(tcol, &(-dfz_dp));
            }

            // Facets of the pyramid inscribed in the cone, edges at the
            // angles 2πs/k in the contact frame.
            let frame = frame_from_normal(&n);
            let (t1, t2) = (frame.row(0).transpose(), frame.row(1).transpose());
            // Emitted even where the frame is degenerate so the sparsity
            // pattern does not depend on the point.
            let dframe = data.curved.then(|| contact_frame_jacobians(surf, &pt).unwrap_or([Matrix3::zeros(); 3]));
            for s_ in 0..FRICTION_FACETS {
                let psi = std::f64::consts::TAU * (s_ as f64 + 0.5) / FRICTION_FACETS as f64;
                let (c, sn) = (psi.cos(), psi.sin());
                let u = t1 * c + t2 * sn;
                sink.row(u.dot(&f) - data.mu_facet * fz, fs, info(ConstraintFamily::FrictionCone, false, leg));
                sink.d3(fcol, &(u - data.mu_facet * n));
                if let Some([dx, dy, _]) = &dframe {
                    let dp = (dx * c + dy * sn).transpose() * f - data.mu_facet * dfz_dp;
                    sink.d3(tcol, &dp);
                }
            }

            let d = signed_distance(surf, &pt);
            let mode = self.modes.as_ref().map(|m| m[j - 1][p]);
            if mode == Some(true) {
                sink.row(d, ls, info(ConstraintFamily::Complementarity, true, leg));
                sink.d3(tcol, &n);
                for h in &data.region {
                    sink.row(h.normal.dot(&pt) - h.offset, ls, info(ConstraintFamily::Region, false, leg));
                    sink.d3(tcol, &h.normal);
                }
                continue;
            }
            if data.solid {
                sink.row(-d, ls, info(ConstraintFamily::Nonpenetration, false, leg));
                sink.d3(tcol, &(-n));
            } else if !data.region.is_empty() && (self.config.complementarity || mode.is_some()) {
                // Depth below the patch times depth inside its footprint.
                let (r, excess) = data
                    .region
                    .iter()
                    .map(|h| (h, h.normal.dot(&pt) - h.offset))
                    .fold((&data.region[0], f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                let (below, inside) = ((-d).max(0.0), (-excess).max(0.0));
                let relax_ll = if mode.is_some() { 0.0 } else { self.config.relax * ls * ls };
                sink.row(below * inside - relax_ll, ls * ls, info(ConstraintFamily::KeepOut, false, leg));
                let mut grad = Vector3::zeros();
                if d < 0.0 {
                    grad -= n * inside;
                }
                if excess < 0.0 {
                    grad -= r.normal * below;
                }
                sink.d3(tcol, &grad);
            }

            if self.config.complementarity && mode.is_none() {
                let signs: &[f64] = if data.solid { &[1.0] } else { &[1.0, -1.0] };
                for &sign in signs {
                    sink.row(sign * fz * d - relax_fl, fs * ls, info(ConstraintFamily::Complementarity, false, leg));
                    sink.d3(fcol, &(sign * d * n));
                    let dp = if data.curved { fz * n + d * dfz_dp } else { fz * n };
                    sink.d3(tcol, &(sign * dp));
                }
                for h in &data.region {
                    let excess = h.normal.dot(&pt) - h.offset;
                    sink.row(fz * excess - relax_fl, fs * ls, info(ConstraintFamily::Region, false, leg));
                    sink.d3(fcol, &(excess * n));
                    let dp = if data.curved { fz * h.normal + excess * dfz_dp } else { fz * h.normal };
                    sink.d3(tcol, &dp);
                }
            }
        }

        // Leg normal forces of this and the previous round.
        let normal_sum = |st: &RoundState<f64>, leg: usize| -> f64 {
            lay.leg_pairs[leg]
                .clone()
                .map(|p| {
                    let surf = &scene.surfaces[lay.pairs[p].surface];
                    surf.normal_at(&st.toes[leg]).unwrap_or(Vector3::zeros()).dot(&force_of(st, p))
                })
                .sum()
        };
        // Gradient of a leg's normal force with respect to its pair forces
        // and its toe.
        let emit_normal_grad = |sink: &mut Sink, st: &RoundState<f64>, round: usize, leg: usize, scale: f64| {
            let mut dtoe = Vector3::zeros();
            let mut curved = false;
            for p in lay.leg_pairs[leg].clone() {
                let surf = &scene.surfaces[lay.pairs[p].surface];
                let n = surf.normal_at(&st.toes[leg]).unwrap_or(Vector3::zeros());
                sink.d3(lay.force(round, p), &(scale * n));
                if self.pair_data[p].curved {
                    curved = true;
                    dtoe += surf.normal_jacobian(&st.toes[leg]) * force_of(st, p);
                }
            }
            if curved {
                sink.d3(lay.toe(round, leg), &(scale * dtoe));
            }
        };

        if let Some(modes) = &self.modes {
            if self.config.stance_hold {
                for leg in 0..lay.n_legs {
                    if lay.leg_pairs[leg].clone().any(|p| modes[j - 1][p]) {
                        let dp = s.toes[leg] - prev.toes[leg];
                        for k in 0..3 {
                            sink.row(dp[k], ls, info(ConstraintFamily::StanceHold, true, Some(leg)));
                            sink.d(lay.toe(j, leg).map(|b| b + k), 1.0);
                            sink.d(lay.toe(j - 1, leg).map(|b| b + k), -1.0);
                        }
                    }
                }
            }
        } else if self.config.switchability && j >= 2 {
            let relax = self.config.relax * fs * fs;
            for leg in 0..lay.n_legs {
                let a = normal_sum(prev, leg);
                let b = normal_sum(s, leg);
                sink.row(a * b - relax, fs * fs, info(ConstraintFamily::Switchability, false, Some(leg)));
                emit_normal_grad(sink, prev, j - 1, leg, b);
                emit_normal_grad(sink, s, j, leg, a);
            }
        }

        if self.config.stance_hold && self.modes.is_none() {
            for leg in 0..lay.n_legs {
                let fz = normal_sum(s, leg);
                let dp = s.toes[leg] - prev.toes[leg];
                for k in 0..3 {
                    for sign in [1.0, -1.0] {
                        sink.row(sign * fz * dp[k] - relax_fl, fs * ls, info(ConstraintFamily::StanceHold, false, Some(leg)));
                        emit_normal_grad(sink, s, j, leg, sign * dp[k]);
                        sink.d(lay.toe(j, leg).map(|b| b + k), sign * fz);
                        sink.d(lay.toe(j - 1, leg).map(|b| b + k), -sign * fz);
                    }
                }
            }
        }

        if self.config.terminal && j == lay.rounds {
            let tol = problem.terminal_tolerance;
            for leg in 0..lay.n_legs {
                let e = s.toes[leg] - problem.targets.toes[leg];
                // Scaled so the row reads as the distance excess over the reach.
                sink.row(e.norm_squared() - tol * tol, 2.0 * tol * ls, info(ConstraintFamily::Terminal, false, Some(leg)));
                sink.d3(lay.toe(j, leg), &(2.0 * e));
            }
        }
    }

    /// Plan cost (physical units) at the scaled point `x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.objective_terms(x, None, None)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_vars());
        self.objective_terms(x, Some(&mut g), None);
        g
    }

    /// Largest deviation of the analytic constraint Jacobian and objective
    /// gradient from central differences at `x`. Each Jacobian column is
    /// compared relative to its largest difference quotient, the gradient
    /// relative to its largest entry (both floored at one).
    pub fn derivative_errors(&self, x: &DVector<f64>) -> DerivativeErrors {
        let jac = self.dense_jacobian(x);
        let grad = self.gradient(x);
        let mut out = DerivativeErrors::default();
        let mut fd_grad = DVector::zeros(x.len());
        for k in 0..x.len() {
            let h = 1e-6 * (1.0 + x[k].abs());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let col = (self.constraints(&xp) - self.constraints(&xm)) / (2.0 * h);
            let scale = col.amax().max(1.0);
            for r in 0..col.len() {
                out.jacobian = out.jacobian.max((jac[(r, k)] - col[r]).abs() / scale);
            }
            fd_grad[k] = (self.objective(&xp) - self.objective(&xm)) / (2.0 * h);
        }
        out.gradient = (&grad - &fd_grad).amax() / fd_grad.amax().max(1.0);
        out
    }

    /// `count` points around `base`, each coordinate moved uniformly by up
    /// to `amplitude` and the result clamped to the bounds.
    pub fn perturbed_points(&self, base: &DVector<f64>, count: usize, amplitude: f64, seed: u64) -> Vec<DVector<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = DVector::from_iterator(base.len(), base.iter().map(|v| v + rng.random_range(-amplitude..=amplitude)));
                self.clamp(&x)
            })
            .collect()
    }

    /// Exact Hessian of the objective in scaled variables.
    pub fn objective_hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_vars();
        let mut h = DMatrix::zeros(n, n);
        self.objective_terms(x, None, Some(&mut h));
        h
    }

    fn objective_terms(&self, x: &DVector<f64>, mut grad: Option<&mut DVector<f64>>, mut hess: Option<&mut DMatrix<f64>>) -> f64 {
        let lay = &self.layout;
        let problem = self.problem;
        let w = &problem.weights;
        let states = self.states(x);
        let sc = &lay.scales;
        let mut cost = 0.0;

        // (a − b)ᵀ Q (a − b) with a, b optional variable blocks.
        let mut quad = |a: Option<usize>, va: &Vector3<f64>, b: Option<usize>, vb: &Vector3<f64>, q: &Matrix3<f64>,
                        grad: &mut Option<&mut DVector<f64>>,
                        hess: &mut Option<&mut DMatrix<f64>>| {
            let e = va - vb;
            let qe = q * e;
            cost += e.dot(&qe);
            if let Some(g) = grad.as_deref_mut() {
                for (base, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(base) = base {
                        for k in 0..3 {
                            g[base + k] += sign * 2.0 * qe[k] * sc[base + k];
                        }
                    }
                }
            }
            if let Some(h) = hess.as_deref_mut() {
                for (r, sr) in [(a, 1.0), (b, -1.0)] {
                    for (c, sc2) in [(a, 1.0), (b, -1.0)] {
                        if let (Some(r), Some(c)) = (r, c) {
                            for u in 0..3 {
                                for v in 0..3 {
                                    h[(r + u, c + v)] += sr * sc2 * 2.0 * q[(u, v)] * sc[r + u] * sc[c + v];
                                }
                            }
                        }
                    }
                }
            }
        };

        let m = lay.rounds;
        let last = &states[m];
        for leg in 0..lay.n_legs {
            quad(lay.toe(m, leg), &last.toes[leg], None, &problem.targets.toes[leg], &w.q_p, &mut grad, &mut hess);
        }
        if let Some(body) = &problem.targets.body {
            quad(lay.com(m), &last.com, None, &body.position, &w.q_body, &mut grad, &mut hess);
            quad(lay.euler(m), &last.body_euler, None, &body.euler, &w.q_body, &mut grad, &mut hess);
        }
        for j in 1..=m {
            let (s, prev) = (&states[j], &states[j - 1]);
            quad(lay.com(j), &s.com, lay.com(j - 1), &prev.com, &w.q_c, &mut grad, &mut hess);
            quad(lay.euler(j), &s.body_euler, lay.euler(j - 1), &prev.body_euler, &w.q_theta, &mut grad, &mut hess);
            for leg in 0..lay.n_legs {
                quad(lay.toe(j, leg), &s.toes[leg], lay.toe(j - 1, leg), &prev.toes[leg], &w.q_delta, &mut grad, &mut hess);
            }
        }

        if w.w_force > 0.0 {
            let eps = self.config.l1_smoothing;
            for j in 1..=m {
                for (p, pair) in lay.pairs.iter().enumerate() {
                    let f = states[j].forces[pair.leg][pair.candidate];
                    let base = lay.force(j, p).unwrap();
                    let wf = w.w_force * self.force_weights.as_ref().map_or(1.0, |fw| fw[j - 1][p]);
                    for k in 0..3 {
                        let (v, d1, d2) = match w.force_cost {
                            ForceCost::L1 => {
                                let r = (f[k] * f[k] + eps * eps).sqrt();
                                (r - eps, f[k] / r, eps * eps / (r * r * r))
                            }
                            ForceCost::L2 => (f[k] * f[k], 2.0 * f[k], 2.0),
                        };
                        cost += wf * v;
                        let s = sc[base + k];
                        if let Some(g) = grad.as_deref_mut() {
                            g[base + k] += wf * d1 * s;
                        }
                        if let Some(h) = hess.as_deref_mut() {
                            h[(base + k, base + k)] += wf * d2 * s * s;
                        }
                    }
                }
            }
        }
        cost
    }

    /// Human-readable listing of variables, bounds and constraint families
    /// with their current worst residual.
    pub fn describe(&self, x: &DVector<f64>) -> String {
        let mut out = String::new();
        let lay = &self.layout;
        let _ = writeln!(
            out,
            "nlp: {} variables ({} per round, {} rounds), {} constraints, {} jacobian entries",
            self.n_vars(),
            lay.block,
            lay.rounds,
            self.n_constraints(),
            self.jac_rows.len()
        );
        let _ = writeln!(out, "relax {:.3e}, objective {:.6e}", self.config.relax, self.objective(x));
        for j in 1..=lay.rounds {
            let name = |i: usize| -> String {
                let local = i - (j - 1) * lay.block;
                match local {
                    0..=2 => format!("com[{}]", local),
                    3..=5 => format!("euler[{}]", local - 3),
                    l if l < lay.force_local(0) => format!("toe[{}][{}]", (l - 6) / 3, (l - 6) % 3),
                    l if l < lay.force_local(lay.pairs.len()) => {
                        let p = (l - lay.force_local(0)) / 3;
                        let pair = lay.pairs[p];
                        format!(
                            "force[{}][{}][{}]",
                            pair.leg,
                            self.problem.scene.surfaces[pair.surface].name,
                            (l - lay.force_local(0)) % 3
                        )
                    }
                    l => format!("joint[{}]", l - lay.force_local(lay.pairs.len())),
                }
            };
            let _ = writeln!(out, "round {j}");
            for i in (j - 1) * lay.block..j * lay.block {
                let _ = writeln!(
                    out,
                    "  {:<28} {:>14.6e}  [{:.3e}, {:.3e}]  scale {:.3e}",
                    name(i),
                    x[i],
                    self.lower[i],
                    self.upper[i],
                    lay.scales[i]
                );
            }
        }
        let g = self.constraints(x);
        let viol = self.violations(&g);
        let mut families: Vec<(ConstraintFamily, usize, f64)> = Vec::new();
        for (i, info) in self.info.iter().enumerate() {
            match families.iter_mut().find(|(f, _, _)| *f == info.family) {
                Some(entry) => {
                    entry.1 += 1;
                    entry.2 = entry.2.max(viol[i]);
                }
                None => families.push((info.family, 1, viol[i])),
            }
        }
        for (family, count, worst) in families {
            let _ = writeln!(out, "  {:<20} rows {:>5}  max violation {:.3e}", format!("{family:?}"), count, worst);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{CostWeights, Targets};
    use crate::kinematics::RobotModel;
    use crate::scene::{scenario_library, ScenarioParams};

    fn problem(rounds: usize) -> PlanProblem<f64> {
        let robot = RobotModel::<f64>::desk_hexapod();
        let scene = scenario_library("parallel_wall", &ScenarioParams::default()).unwrap();
        let toes: Vec<_> = robot
            .legs
            .iter()
            .map(|l| Vector3::new(l.hip_offset.x, l.hip_offset.y.signum() * 0.42, 0.0))
            .collect();
        let stance = RoundState::unloaded(Vector3::new(0.0, 0.0, 0.2), Vector3::zeros(), toes.clone(), &scene);
        PlanProblem {
            robot,
            scene,
            rounds,
            s_mu: 1.1,
            s_tau: 1.8,
            weights: CostWeights::default(),
            targets: Targets { toes, body: None },
            initial_stance: stance,
            switchability: true,
            kinematics_mode: KinematicsMode::Sphere,
            terminal_tolerance: 0.002,
        }
    }

    #[test]
    fn variable_count_for_single_round() {
        let p = problem(1);
        let nlp = NlpInstance::new(&p, NlpConfig::full(&p, 0.0)).unwrap();
        assert_eq!(nlp.n_vars(), 60);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let p = problem(2);
        let nlp = NlpInstance::new(&p, NlpConfig::full(&p, 0.0)).unwrap();
        let mut a = p.initial_stance.clone();
        a.com.x = 0.05;
        a.forces[3][1] = Vector3::new(1.0, 2.0, 3.0);
        let rounds = vec![a.clone(), p.initial_stance.clone()];
        let x = nlp.layout.pack(&rounds);
        let back = nlp.layout.unpack(&x, &p);
        assert!((back[0].forces[3][1] - a.forces[3][1]).norm() < 1e-12);
        assert!((back[0].com - a.com).norm() < 1e-15);
    }

    #[test]
    fn rounds_two_apart_never_couple() {
        let p = problem(4);
        let nlp = NlpInstance::new(&p, NlpConfig::full(&p, 0.0)).unwrap();
        for (&r, &c) in nlp.jac_rows.iter().zip(&nlp.jac_cols) {
            let row_round = nlp.info[r].round;
            let var_round = nlp.layout.round_of(c);
            assert!(var_round == row_round || var_round + 1 == row_round, "row {r} round {row_round} var round {var_round}");
        }
    }

    #[test]
    fn invalid_problem_is_named() {
        let mut p = problem(1);
        p.rounds = 0;
        assert!(matches!(NlpInstance::new(&p, NlpConfig::full(&p, 0.0)), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn describe_lists_families() {
        let p = problem(1);
        let nlp = NlpInstance::new(&p, NlpConfig::full(&p, 0.0)).unwrap();
        let x = nlp.layout.pack(std::slice::from_ref(&p.initial_stance));
        let text = nlp.describe(&x);
        assert!(text.contains("EquilibriumForce"));
        assert!(text.contains("force[0][left_wall][2]"));
    }
}
