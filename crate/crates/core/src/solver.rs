//! Augmented-Lagrangian solver with a projected-Newton inner loop, driven by
//! a complementarity relaxation homotopy.
//!
//! A solve runs in stages:
//!
//! 1. warm start: the program without complementarity-type constraints,
//!    started from a jittered straight-line guess;
//! 2. the full program at each relaxation of the schedule;
//! 3. at relaxation zero, the contact mode of the last stage is read off
//!    (loaded pairs touch, unloaded pairs carry nothing) and the program
//!    restricted to that mode is solved; when that fails the plain
//!    zero-relaxation program is tried instead.
//!
//! The final status comes from recomputed residuals, never from the
//! solver's internal bookkeeping.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{leg_normal_force, normal_tangential, NlpConfig, NlpInstance, PlanProblem, ResidualReport, RoundState};
use crate::scene::signed_distance;
use crate::verify::{label_rounds, SequenceLabel};

/// Ordered best first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    IterationLimit,
    TimeLimit,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "Optimal",
            SolveStatus::Feasible => "Feasible",
            SolveStatus::IterationLimit => "IterationLimit",
            SolveStatus::TimeLimit => "TimeLimit",
            SolveStatus::Infeasible => "Infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Multiplier updates per stage.
    pub max_outer_iterations: usize,
    /// Newton steps per multiplier update.
    pub max_inner_iterations: usize,
    pub kkt_tolerance: f64,
    /// Decreasing relaxations; the last is the final stage.
    pub complementarity_schedule: Vec<f64>,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub multistart_count: usize,
    pub rng_seed: u64,
    /// Seconds per solve.
    pub time_budget: f64,
    /// Amplitude of the random perturbation of the initial guess (m).
    pub jitter: f64,
    /// Log-spread of the random per-pair force-cost factors of the warm
    /// start; zero disables them.
    pub force_weight_spread: f64,
    /// Solve the final stage on the identified contact mode.
    pub identify_modes: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 40,
            max_inner_iterations: 200,
            kkt_tolerance: 1e-6,
            complementarity_schedule: vec![1e-1, 1e-2, 1e-3, 0.0],
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            multistart_count: 1,
            rng_seed: 0,
            time_budget: 120.0,
            jitter: 0.02,
            force_weight_spread: 1.5,
            identify_modes: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidOptions(m.to_string()));
        if self.complementarity_schedule.is_empty() {
            return bad("complementarity_schedule must not be empty");
        }
        if self.complementarity_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return bad("complementarity_schedule must be strictly decreasing");
        }
        if !(self.complementarity_schedule[self.complementarity_schedule.len() - 1] >= 0.0) {
            return bad("complementarity_schedule must end at a nonnegative value");
        }
        if !(self.kkt_tolerance > 0.0) {
            return bad("kkt_tolerance must be positive");
        }
        if !(self.penalty_growth > 1.0) {
            return bad("penalty_growth must exceed 1");
        }
        if !(self.initial_penalty > 0.0) || !(self.max_penalty > self.initial_penalty) {
            return bad("penalties must be positive with max_penalty above initial_penalty");
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return bad("iteration limits must be positive");
        }
        if self.multistart_count == 0 {
            return bad("multistart_count must be at least 1");
        }
        if !(self.time_budget > 0.0) {
            return bad("time_budget must be positive");
        }
        if !(self.jitter >= 0.0) || !(self.force_weight_spread >= 0.0) {
            return bad("jitter and force_weight_spread must be nonnegative");
        }
        Ok(())
    }
}

/// Summary of one homotopy stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub relax: f64,
    /// Largest normalized complementarity-type violation after the stage.
    pub complementarity: f64,
    /// Largest normalized constraint violation of the stage's program.
    pub violation: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Rounds `1..=M`.
    pub rounds: Vec<RoundState<f64>>,
    pub objective: f64,
    pub residuals: ResidualReport,
    pub label: SequenceLabel,
    /// Newton steps over all stages.
    pub iterations: usize,
    pub wall_time: f64,
    pub start_index: usize,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageStop {
    Converged,
    PenaltyLimit,
    IterationLimit,
    TimeLimit,
}

struct StageOutcome {
    x: DVector<f64>,
    lambda: DVector<f64>,
    rho: f64,
    iterations: usize,
    violation: f64,
    stop: StageStop,
}

/// Row-wise view of the sparse Jacobian pattern.
struct RowPattern {
    entries: Vec<Vec<usize>>,
}

impl RowPattern {
    fn new(nlp: &NlpInstance) -> Self {
        let mut entries = vec![Vec::new(); nlp.n_constraints()];
        for (t, &r) in nlp.jac_rows.iter().enumerate() {
            entries[r].push(t);
        }
        Self { entries }
    }
}

/// Augmented Lagrangian of one program at fixed multipliers and penalty.
struct Merit<'n, 'a> {
    nlp: &'n NlpInstance<'a>,
    pattern: RowPattern,
    equality: Vec<bool>,
    lambda: DVector<f64>,
    rho: f64,
}

impl<'n, 'a> Merit<'n, 'a> {
    fn new(nlp: &'n NlpInstance<'a>, lambda: DVector<f64>, rho: f64) -> Self {
        let equality = nlp.info.iter().map(|i| i.equality).collect();
        Self { nlp, pattern: RowPattern::new(nlp), equality, lambda, rho }
    }

    /// Multiplier estimates `y(x)` for the current constraint values.
    fn duals(&self, c: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            c.len(),
            (0..c.len()).map(|i| {
                let s = self.lambda[i] + self.rho * c[i];
                if self.equality[i] {
                    s
                } else {
                    s.max(0.0)
                }
            }),
        )
    }

    fn penalty_terms(&self, c: &DVector<f64>) -> f64 {
        let rho = self.rho;
        (0..c.len())
            .map(|i| {
                let l = self.lambda[i];
                if self.equality[i] {
                    l * c[i] + 0.5 * rho * c[i] * c[i]
                } else {
                    let s = (l + rho * c[i]).max(0.0);
                    (s * s - l * l) / (2.0 * rho)
                }
            })
            .sum()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.nlp.objective(x) + self.penalty_terms(&self.nlp.constraints(x))
    }

    fn jt_times(&self, vals: &[f64], y: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.nlp.n_vars());
        for ((&r, &c), v) in self.nlp.jac_rows.iter().zip(&self.nlp.jac_cols).zip(vals) {
            g[c] += v * y[r];
        }
        g
    }

    /// Value, gradient, and the Newton model Hessian.
    fn second_order(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let nlp = self.nlp;
        let n = nlp.n_vars();
        let (c, vals) = nlp.constraints_and_jacobian(x);
        let y = self.duals(&c);
        let value = nlp.objective(x) + self.penalty_terms(&c);
        let jty = self.jt_times(&vals, &y);
        let grad = nlp.gradient(x) + &jty;
        let mut h = nlp.objective_hessian(x);

        // Penalty curvature ρ Jᵀ J over equality and active inequality rows.
        for (row, entries) in self.pattern.entries.iter().enumerate() {
            if !self.equality[row] && y[row] <= 0.0 {
                continue;
            }
            let mut dense: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for &t in entries {
                let col = nlp.jac_cols[t];
                match dense.iter_mut().find(|(c2, _)| *c2 == col) {
                    Some(e) => e.1 += vals[t],
                    None => dense.push((col, vals[t])),
                }
            }
            for &(a, va) in &dense {
                for &(b, vb) in &dense {
                    h[(a, b)] += self.rho * va * vb;
                }
            }
        }

        // Constraint curvature Σ yᵢ ∇²cᵢ by forward differences of Jᵀy.
        if y.iter().any(|&v| v != 0.0) {
            let step = 1e-7;
            let mut xp = x.clone();
            let mut d = DMatrix::zeros(n, n);
            for k in 0..n {
                let h_k = step * (1.0 + x[k].abs());
                xp[k] = x[k] + h_k;
                let (_, vp) = nlp.constraints_and_jacobian(&xp);
                xp[k] = x[k];
                let col = (self.jt_times(&vp, &y) - &jty) / h_k;
                d.set_column(k, &col);
            }
            h += (&d + d.transpose()) * 0.5;
        }
        (value, grad, h)
    }
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (0..x.len()).map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs()).fold(0.0, f64::max)
}

/// Cholesky of `h + τI` with the smallest `τ` from a doubling sequence that
/// makes it positive definite.
fn modified_cholesky(mut h: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut tau = 0.0;
    for _ in 0..60 {
        if tau > 0.0 {
            for i in 0..n {
                h[(i, i)] += tau;
            }
        }
        if let Some(ch) = h.clone().cholesky() {
            return Some(ch);
        }
        if tau > 0.0 {
            for i in 0..n {
                h[(i, i)] -= tau;
            }
        }
        tau = if tau == 0.0 { 1e-10 * scale } else { tau * 4.0 };
    }
    None
}

enum InnerStop {
    Converged,
    Stalled,
    IterationLimit,
    TimeLimit,
}

/// Projected Newton (Bertsekas) on the box `lower ≤ x ≤ upper`.
fn minimize_box(merit: &Merit, x: &mut DVector<f64>, tol: f64, max_iter: usize, deadline: Instant, iterations: &mut usize) -> InnerStop {
    let (lo, hi) = (&merit.nlp.lower, &merit.nlp.upper);
    let n = x.len();
    for _ in 0..max_iter {
        if Instant::now() >= deadline {
            return InnerStop::TimeLimit;
        }
        let (value, g, h) = merit.second_order(x);
        let pg = projected_gradient_norm(x, &g, lo, hi);
        if pg <= tol {
            return InnerStop::Converged;
        }
        *iterations += 1;
        let eps = pg.min(1e-3);
        let active: Vec<bool> = (0..n)
            .map(|i| lo[i] == hi[i] || (x[i] <= lo[i] + eps && g[i] > 0.0) || (x[i] >= hi[i] - eps && g[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        let mut d = DVector::zeros(n);
        for i in 0..n {
            if active[i] {
                d[i] = -g[i];
            }
        }
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let df = match modified_cholesky(hf) {
                Some(ch) => -ch.solve(&gf),
                None => -gf,
            };
            for (a, &i) in free.iter().enumerate() {
                d[i] = df[a];
            }
        }

        let try_direction = |d: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
            let mut alpha = 1.0;
            for _ in 0..50 {
                let xn = DVector::from_iterator(n, (0..n).map(|i| (x[i] + alpha * d[i]).clamp(lo[i], hi[i])));
                let mut decrease = 0.0;
                for i in 0..n {
                    decrease += if active[i] { g[i] * (x[i] - xn[i]) } else { -alpha * g[i] * d[i] };
                }
                let vn = merit.value(&xn);
                if vn.is_finite() && value - vn >= 1e-4 * decrease && decrease >= 0.0 {
                    return Some((xn, vn));
                }
                alpha *= 0.5;
            }
            None
        };
        let step = try_direction(&d).or_else(|| try_direction(&(-&g)));
        match step {
            Some((xn, vn)) => {
                let moved = (&xn - &*x).amax();
                *x = xn;
                if moved <= 1e-15 * (1.0 + x.amax()) && (value - vn).abs() <= 1e-16 * (1.0 + value.abs()) {
                    return InnerStop::Stalled;
                }
            }
            None => return InnerStop::Stalled,
        }
    }
    InnerStop::IterationLimit
}

/// Largest violation in the multiplier-aware sense used for penalty
/// updates: `|c|` on equalities, `|min(−c, λ/ρ)|` on inequalities.
fn kkt_violation(c: &DVector<f64>, lambda: &DVector<f64>, rho: f64, equality: &[bool]) -> f64 {
    (0..c.len())
        .map(|i| if equality[i] { c[i].abs() } else { (-c[i]).min(lambda[i] / rho).abs() })
        .fold(0.0, f64::max)
}

struct StageContext<'l> {
    options: SolverOptions,
    deadline: Instant,
    log: &'l mut dyn Write,
}

fn run_stage(
    nlp: &NlpInstance,
    x0: &DVector<f64>,
    warm: Option<(DVector<f64>, f64)>,
    name: &str,
    ctx: &mut StageContext,
) -> StageOutcome {
    let opts = &ctx.options;
    let m = nlp.n_constraints();
    let (lambda, rho) = warm
        .filter(|(l, _)| l.len() == m)
        .unwrap_or_else(|| (DVector::zeros(m), opts.initial_penalty));
    let mut merit = Merit::new(nlp, lambda, rho);
    let mut x = nlp.clamp(x0);
    let mut iterations = 0;
    let mut prev_v = f64::INFINITY;
    let mut stop = StageStop::IterationLimit;
    let mut violation = f64::INFINITY;
    for outer in 0..opts.max_outer_iterations {
        let omega = opts.kkt_tolerance.max(10f64.powi(-(outer as i32 + 1)));
        let inner = minimize_box(&merit, &mut x, omega, opts.max_inner_iterations, ctx.deadline, &mut iterations);
        let c = nlp.constraints(&x);
        let v = kkt_violation(&c, &merit.lambda, merit.rho, &merit.equality);
        violation = nlp.violations(&c).amax();
        let _ = writeln!(
            ctx.log,
            "stage {name} relax {:.1e} outer {outer} merit {:.9e} max_residual {:.3e} rho {:.1e} newton {iterations}",
            nlp.config.relax,
            merit.value(&x),
            violation,
            merit.rho
        );
        if matches!(inner, InnerStop::TimeLimit) {
            stop = StageStop::TimeLimit;
            break;
        }
        merit.lambda = merit.duals(&c);
        let converged_inner = matches!(inner, InnerStop::Converged | InnerStop::Stalled);
        if v <= opts.kkt_tolerance && violation <= opts.kkt_tolerance && omega <= opts.kkt_tolerance && converged_inner {
            stop = StageStop::Converged;
            break;
        }
        if v > 0.25 * prev_v || v > opts.kkt_tolerance && outer > 0 && !converged_inner {
            merit.rho *= opts.penalty_growth;
        }
        prev_v = v;
        if merit.rho > opts.max_penalty {
            stop = StageStop::PenaltyLimit;
            break;
        }
    }
    StageOutcome { x, lambda: merit.lambda, rho: merit.rho, iterations, violation, stop }
}

fn complementarity_violation(nlp: &NlpInstance, x: &DVector<f64>) -> f64 {
    let c = nlp.constraints(x);
    let v = nlp.violations(&c);
    nlp.info
        .iter()
        .zip(v.iter())
        .filter(|(i, _)| i.family.is_complementarity())
        .map(|(_, &v)| v)
        .fold(0.0, f64::max)
}

/// Straight-line initial guess with seeded jitter on toes, body and forces.
fn initial_guess(problem: &PlanProblem<f64>, seed: u64, jitter: f64) -> Vec<RoundState<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = &problem.initial_stance;
    let m = problem.rounds;
    let mut noise = |scale: f64| Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0) * scale);
    (1..=m)
        .map(|j| {
            let t = j as f64 / m as f64;
            let mut s = start.clone();
            s.com += noise(jitter);
            for (leg, p) in s.toes.iter_mut().enumerate() {
                *p += (problem.targets.toes[leg] - *p) * t;
                if j < m {
                    *p += noise(jitter);
                }
            }
            let f_scale = problem.force_scale() * jitter;
            for f in s.forces.iter_mut().flatten() {
                *f += noise(f_scale * 10.0);
            }
            s
        })
        .collect()
}

/// Initial guess from the program without complementarity, switchability
/// and stance-hold constraints. Falls back to the jittered straight-line
/// guess when that program cannot be solved.
pub fn warm_start(problem: &PlanProblem<f64>, options: &SolverOptions) -> Result<Vec<RoundState<f64>>> {
    options.validate()?;
    let deadline = Instant::now() + Duration::from_secs_f64(options.time_budget);
    let mut sink = std::io::sink();
    let mut ctx = StageContext { options: options.clone(), deadline, log: &mut sink };
    Ok(warm_start_inner(problem, options.rng_seed, &mut ctx)?.0)
}

/// Seeded per-pair force-cost factors: different starts prefer to load
/// different legs. Used by the warm start and the relaxed stages, never by
/// the final stage.
fn force_preferences(problem: &PlanProblem<f64>, seed: u64, options: &SolverOptions) -> Option<Vec<Vec<f64>>> {
    let spread = options.force_weight_spread;
    if spread <= 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0ce);
    let pairs = problem.scene.pair_count();
    Some((0..problem.rounds).map(|_| (0..pairs).map(|_| (spread * rng.random_range(-1.0..=1.0)).exp()).collect()).collect())
}

fn warm_start_inner(problem: &PlanProblem<f64>, seed: u64, ctx: &mut StageContext) -> Result<(Vec<RoundState<f64>>, StageRecord)> {
    let guess = initial_guess(problem, seed, ctx.options.jitter);
    let mut nlp = NlpInstance::new(problem, NlpConfig::relaxed())?;
    if let Some(f) = force_preferences(problem, seed, &ctx.options) {
        nlp = nlp.with_force_weights(f)?;
    }
    let x0 = nlp.layout.pack(&guess);
    let out = run_stage(&nlp, &x0, None, "warm", ctx);
    let record = StageRecord {
        name: "warm".into(),
        relax: f64::INFINITY,
        complementarity: f64::NAN,
        violation: out.violation,
        objective: nlp.objective(&out.x),
        iterations: out.iterations,
    };
    let rounds = if out.x.iter().all(|v| v.is_finite()) { nlp.layout.unpack(&out.x, problem) } else { guess };
    Ok((rounds, record))
}

/// Contact mode read off a relaxed solution: a pair is loaded when its
/// normal force (fraction of body weight) exceeds its distance (fraction of
/// reach). With switchability on, a leg loaded in two consecutive rounds
/// keeps only the round with the larger force.
pub fn identify_modes(problem: &PlanProblem<f64>, rounds: &[RoundState<f64>]) -> Vec<Vec<bool>> {
    let scene = &problem.scene;
    let (fs, ls) = (problem.force_scale(), problem.length_scale());
    let mut modes: Vec<Vec<bool>> = rounds
        .iter()
        .map(|s| {
            let mut row = Vec::new();
            for (leg, cands) in scene.candidate_map.iter().enumerate() {
                for (k, &surf) in cands.iter().enumerate() {
                    let surface = &scene.surfaces[surf];
                    let p = s.toes[leg];
                    let (fz, _) = normal_tangential(&s.forces[leg][k], surface, &p);
                    let d = signed_distance(surface, &p).abs();
                    row.push(fz / fs > d / ls && surface.region.contains(&p, 0.05 * ls));
                }
            }
            row
        })
        .collect();
    if problem.switchability {
        let mut first = 0;
        let ranges: Vec<_> = scene
            .candidate_map
            .iter()
            .map(|c| {
                let r = first..first + c.len();
                first += c.len();
                r
            })
            .collect();
        for j in 1..rounds.len() {
            for (leg, r) in ranges.iter().enumerate() {
                let on = |m: &Vec<bool>| r.clone().any(|p| m[p]);
                if on(&modes[j - 1]) && on(&modes[j]) {
                    let a = leg_normal_force(&rounds[j - 1], scene, leg);
                    let b = leg_normal_force(&rounds[j], scene, leg);
                    let drop = if a >= b { j } else { j - 1 };
                    for p in r.clone() {
                        modes[drop][p] = false;
                    }
                }
            }
        }
    }
    modes
}

fn classify(report: &ResidualReport, stop: StageStop, tol: f64) -> SolveStatus {
    let worst = report.max();
    match stop {
        StageStop::Converged if worst <= tol => SolveStatus::Optimal,
        _ if worst <= 1e2 * tol => SolveStatus::Feasible,
        StageStop::TimeLimit => SolveStatus::TimeLimit,
        StageStop::IterationLimit => SolveStatus::IterationLimit,
        StageStop::Converged | StageStop::PenaltyLimit => SolveStatus::Infeasible,
    }
}

/// Solves one problem from the warm start of `options.rng_seed`.
pub fn solve(problem: &PlanProblem<f64>, options: &SolverOptions) -> Result<SolveResult> {
    solve_logged(problem, options, &mut std::io::sink())
}

/// [`solve`] writing one line per outer iteration to `log`.
pub fn solve_logged(problem: &PlanProblem<f64>, options: &SolverOptions, log: &mut dyn Write) -> Result<SolveResult> {
    solve_start(problem, options, 0, log)
}

fn solve_start(problem: &PlanProblem<f64>, options: &SolverOptions, start_index: usize, log: &mut dyn Write) -> Result<SolveResult> {
    options.validate()?;
    problem.validate()?;
    let started = Instant::now();
    let deadline = started + Duration::from_secs_f64(options.time_budget);
    let seed = options.rng_seed.wrapping_add(start_index as u64);
    let mut ctx = StageContext { options: options.clone(), deadline, log };
    let tol = options.kkt_tolerance;

    let (guess, warm_record) = warm_start_inner(problem, seed, &mut ctx)?;
    let mut stages = vec![warm_record];
    let mut iterations = stages[0].iterations;

    let schedule = &options.complementarity_schedule;
    let last_relax = schedule[schedule.len() - 1];
    let mut rounds = guess;
    let mut warm: Option<(DVector<f64>, f64)> = None;
    let mut last_stop = StageStop::IterationLimit;
    let homotopy_len = if options.identify_modes && last_relax == 0.0 { schedule.len() - 1 } else { schedule.len() };
    for &relax in &schedule[..homotopy_len] {
        let mut nlp = NlpInstance::new(problem, NlpConfig::full(problem, relax))?;
        if relax > 0.0 {
            if let Some(f) = force_preferences(problem, seed, options) {
                nlp = nlp.with_force_weights(f)?;
            }
        }
        let x0 = nlp.layout.pack(&rounds);
        let name = format!("relax {relax:.0e}");
        let out = run_stage(&nlp, &x0, warm.take(), &name, &mut ctx);
        iterations += out.iterations;
        stages.push(StageRecord {
            name,
            relax,
            complementarity: complementarity_violation(&nlp, &out.x),
            violation: out.violation,
            objective: nlp.objective(&out.x),
            iterations: out.iterations,
        });
        rounds = nlp.layout.unpack(&out.x, problem);
        last_stop = out.stop;
        warm = Some((out.lambda, out.rho.min(1e4)));
        if out.stop == StageStop::TimeLimit {
            break;
        }
    }

    if homotopy_len < schedule.len() && last_stop != StageStop::TimeLimit {
        let relaxed = rounds.clone();
        let modes = identify_modes(problem, &relaxed);
        let nlp = NlpInstance::with_modes(problem, NlpConfig::full(problem, 0.0), modes)?;
        let out = run_stage(&nlp, &nlp.layout.pack(&relaxed), None, "mode", &mut ctx);
        iterations += out.iterations;
        let mode_rounds = nlp.layout.unpack(&out.x, problem);
        let mode_report = ResidualReport::compute(problem, &mode_rounds);
        stages.push(StageRecord {
            name: "mode".into(),
            relax: 0.0,
            complementarity: complementarity_violation(&nlp, &out.x),
            violation: out.violation,
            objective: nlp.objective(&out.x),
            iterations: out.iterations,
        });
        rounds = mode_rounds;
        last_stop = out.stop;
        let mode_ok = out.stop == StageStop::Converged && mode_report.max() <= tol;
        if !mode_ok && out.stop != StageStop::TimeLimit {
            let nlp = NlpInstance::new(problem, NlpConfig::full(problem, 0.0))?;
            let out = run_stage(&nlp, &nlp.layout.pack(&relaxed), warm.take(), "relax 0", &mut ctx);
            iterations += out.iterations;
            let plain_rounds = nlp.layout.unpack(&out.x, problem);
            let plain_report = ResidualReport::compute(problem, &plain_rounds);
            stages.push(StageRecord {
                name: "relax 0".into(),
                relax: 0.0,
                complementarity: complementarity_violation(&nlp, &out.x),
                violation: out.violation,
                objective: nlp.objective(&out.x),
                iterations: out.iterations,
            });
            let better = classify(&plain_report, out.stop, tol) < classify(&mode_report, last_stop, tol)
                || plain_report.max() < mode_report.max() && out.stop != StageStop::TimeLimit;
            if better {
                rounds = plain_rounds;
                last_stop = out.stop;
            }
        }
    }

    let residuals = ResidualReport::compute(problem, &rounds);
    let status = classify(&residuals, last_stop, tol);
    let objective = crate::formulation::objective(&rounds, problem);
    let label = label_rounds(problem, &rounds, 0.5, 0.005);
    Ok(SolveResult {
        status,
        rounds,
        objective,
        residuals,
        label,
        iterations,
        wall_time: started.elapsed().as_secs_f64(),
        start_index,
        stages,
    })
}

/// Independent solves from seeds `rng_seed + k`, `k < multistart_count`,
/// run in parallel and merged in seed order; sorted by (status, objective,
/// start index) and reduced to the best result per sequence label.
pub fn multistart(problem: &PlanProblem<f64>, options: &SolverOptions) -> Result<Vec<SolveResult>> {
    let all = multistart_all(problem, options)?;
    let mut seen = std::collections::HashSet::new();
    Ok(all.into_iter().filter(|r| seen.insert(r.label.text.clone())).collect())
}

/// Every multistart result, sorted but not deduplicated.
pub fn multistart_all(problem: &PlanProblem<f64>, options: &SolverOptions) -> Result<Vec<SolveResult>> {
    options.validate()?;
    problem.validate()?;
    let mut results = (0..options.multistart_count)
        .into_par_iter()
        .map(|k| solve_start(problem, options, k, &mut std::io::sink()))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        a.status
            .cmp(&b.status)
            .then(a.objective.total_cmp(&b.objective))
            .then(a.start_index.cmp(&b.start_index))
    });
    Ok(results)
}
