//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::Instant;

use climbplan::formulation::{NlpConfig, NlpInstance};
use climbplan::kinematics::force_bound;
use climbplan::scene::{signed_distance, ScenarioParams, SCENARIOS};
use climbplan::setup::standard_problem;
use climbplan::solver::{multistart_all, solve, SolveResult, SolverOptions};
use climbplan::trajectory::{
    interpolate_result, round_deflections, DeflectionModel, DeflectionOptions, ToeSegment, TrajectoryOptions,
};
use climbplan::verify::{
    check_solution, equilibrium_oracle, normal_force_table, Contact, Stance, Tolerances, DEFAULT_PYRAMID_SIDES,
};
use climbplan::formulation::normal_tangential;
use climbplan::{PlanProblem, SolveStatus};
use climbplan_cli::{run_pipeline, solve_config, ScenarioConfig, BUNDLED_CONFIGS};

const RESIDUAL_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn bundled(name: &str) -> ScenarioConfig {
    let text = BUNDLED_CONFIGS.iter().find(|(n, _)| *n == name).expect("bundled config").1;
    ScenarioConfig::parse(text).unwrap()
}

/// Optimal solutions with their problems, shared between criteria.
struct Solved {
    problem: PlanProblem,
    result: SolveResult,
}

fn wall_problem(switchability: bool) -> PlanProblem {
    let mut p = bundled("parallel_wall").to_problem().unwrap();
    p.switchability = switchability;
    p
}

fn criterion_1(s: &Solved) -> Outcome {
    let r = &s.result;
    let last = r.rounds.last().unwrap();
    let worst_toe = last.toes.iter().zip(&s.problem.targets.toes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let report = check_solution(r, &s.problem, &Tolerances::default()).report;
    let detail = format!(
        "status {} label {} max residual {:.2e} ({}) worst toe {:.2} mm, {:.1} s",
        r.status,
        r.label.text,
        report.max(),
        report.worst().0,
        worst_toe * 1e3,
        r.wall_time
    );
    check(
        r.status == SolveStatus::Optimal && report.max() <= RESIDUAL_TOL && worst_toe <= 5e-3 && r.wall_time < 120.0,
        detail.clone(),
        detail,
    )
}

fn criterion_2() -> (Outcome, Vec<Solved>) {
    let p = wall_problem(false);
    let opts = SolverOptions { multistart_count: 10, ..Default::default() };
    let all = multistart_all(&p, &opts).unwrap();
    let labels: BTreeSet<String> =
        all.iter().filter(|r| r.status == SolveStatus::Optimal).map(|r| r.label.text.clone()).collect();
    let optimal = all.iter().filter(|r| r.status == SolveStatus::Optimal).count();
    let detail = format!("{optimal}/10 Optimal, labels {labels:?}");
    let solved = all
        .into_iter()
        .filter(|r| r.status == SolveStatus::Optimal)
        .map(|result| Solved { problem: p.clone(), result })
        .collect();
    (check(labels.len() >= 2, detail.clone(), detail), solved)
}

fn criterion_3(switching: &[Solved]) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in switching {
        let table = normal_force_table(&s.problem, &s.result.rounds);
        for j in 2..table.len() {
            for leg in 0..s.problem.n_legs() {
                worst = worst.max(table[j - 1][leg].min(table[j][leg]));
            }
        }
    }
    let detail = format!("{} solutions, worst min(Σfz(j−1), Σfz(j)) = {worst:.3e} N", switching.len());
    check(!switching.is_empty() && worst <= 0.5, detail.clone(), detail)
}

fn brace(p: &PlanProblem) -> Stance {
    let contacts = (0..p.n_legs())
        .map(|leg| {
            let position = p.targets.toes[leg];
            let surface = *p.scene.candidate_map[leg]
                .iter()
                .find(|&&s| signed_distance(&p.scene.surfaces[s], &position).abs() < 1e-9)
                .unwrap();
            Contact { leg, surface, position }
        })
        .collect();
    Stance { contacts, com: p.initial_stance.com, body_euler: nalgebra::Vector3::zeros() }
}

fn criterion_4(all: &[&Solved]) -> Outcome {
    let tol = Tolerances::default();
    let grid = [1.1, 2.0, 5.0, 20.0];
    let mut rejected = 0;
    let mut rounds = 0;
    let mut non_monotone = 0;
    for s in all {
        let c = check_solution(&s.result, &s.problem, &tol);
        rounds += c.oracle_feasible.len();
        rejected += c.oracle_feasible.iter().filter(|f| !**f).count();
        let floor = 1e-6 * s.problem.force_scale();
        for round in &s.result.rounds {
            let st = Stance::from_round(round, &s.problem.scene, floor, tol.distance_threshold);
            let verdicts: Vec<bool> = grid
                .iter()
                .map(|&mu| {
                    equilibrium_oracle(&st, &s.problem.robot, &s.problem.scene, mu, s.problem.s_tau, DEFAULT_PYRAMID_SIDES)
                        .is_feasible()
                })
                .collect();
            if verdicts.windows(2).any(|w| !w[0] && w[1]) {
                non_monotone += 1;
            }
        }
    }
    let p = wall_problem(true);
    let b = brace(&p);
    let brace_at = |mu: f64| equilibrium_oracle(&b, &p.robot, &p.scene, mu, p.s_tau, DEFAULT_PYRAMID_SIDES).is_feasible();
    let (nominal, extreme) = (brace_at(1.1), brace_at(20.0));
    let detail = format!(
        "oracle rejects {rejected}/{rounds} optimal rounds, {non_monotone} non-monotone stances, brace feasible at 1.1: {nominal}, at 20: {extreme}"
    );
    check(rounds > 0 && rejected == 0 && non_monotone == 0 && nominal && !extreme, detail.clone(), detail)
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, name) in SCENARIOS.iter().enumerate() {
        let p = standard_problem(name, &ScenarioParams::default()).unwrap();
        let nlp = NlpInstance::new(&p, NlpConfig::full(&p, 0.0)).unwrap();
        let base = nlp.layout.pack(&vec![p.initial_stance.clone(); p.rounds]);
        for x in nlp.perturbed_points(&base, 20, 0.05, i as u64) {
            worst = worst.max(nlp.derivative_errors(&x).max());
        }
    }
    let detail = format!("{} scenarios × 20 points, worst relative error {worst:.2e}", SCENARIOS.len());
    check(worst < 1e-5, detail.clone(), detail)
}

fn criterion_6(all: &[&Solved]) -> Outcome {
    let a: f64 = force_bound(27.0, 0.9635, 1.8);
    let b: f64 = force_bound(27.0, 0.9635, 0.85);
    let arithmetic = (a - 15.57).abs() <= 0.01 && (b - 32.97).abs() <= 0.01;
    let mut excess: f64 = f64::NEG_INFINITY;
    for s in all {
        let p = &s.problem;
        let bound = p.robot.force_bound(p.s_tau);
        for r in &s.result.rounds {
            let rt = r.pose().rotation().transpose();
            for leg in 0..p.n_legs() {
                excess = excess.max((rt * r.leg_force(leg)).amax() - bound);
            }
        }
    }
    // Same normalized tolerance as the residual families.
    let slack = RESIDUAL_TOL * all.first().map(|s| s.problem.force_scale()).unwrap_or(1.0);
    let detail = format!("bounds {a:.2} N, {b:.2} N; largest body-frame component minus bound {excess:.3e} N");
    check(arithmetic && excess <= slack, detail.clone(), detail)
}

fn criterion_7(all: &[&Solved]) -> Outcome {
    let (mut product, mut min_fz, mut min_d) = (0.0f64, f64::INFINITY, f64::INFINITY);
    for s in all {
        let p = &s.problem;
        let norm = p.force_scale() * p.length_scale();
        for r in &s.result.rounds {
            for (leg, cands) in p.scene.candidate_map.iter().enumerate() {
                for (k, &si) in cands.iter().enumerate() {
                    let surf = &p.scene.surfaces[si];
                    let (fz, _) = normal_tangential(&r.forces[leg][k], surf, &r.toes[leg]);
                    let d = signed_distance(surf, &r.toes[leg]);
                    product = product.max((fz * d).abs() / norm);
                    min_fz = min_fz.min(fz);
                    if surf.solid {
                        min_d = min_d.min(d);
                    }
                }
            }
        }
    }
    let detail = format!("max |fz·d| {product:.2e} (normalized), min fz {min_fz:.2e} N, min d {min_d:.2e} m");
    check(product <= 1e-4 && min_fz >= -1e-6 && min_d >= -1e-6, detail.clone(), detail)
}

fn criterion_8(all: &[&Solved]) -> Outcome {
    let opts = TrajectoryOptions::default();
    let (mut vjm_worst, mut normal, mut vector, mut unsolved) = (0.0f64, 0, 0, 0);
    let (mut waypoint, mut penetration) = (0.0f64, 0.0f64);
    for s in all {
        let p = &s.problem;
        let traj = interpolate_result(&s.result, p, &opts).unwrap();
        for (j, d) in round_deflections(&traj, p, &DeflectionOptions::default()).iter().enumerate().skip(1) {
            match d {
                Ok(cmd) => {
                    match cmd.model {
                        DeflectionModel::Normal => normal += 1,
                        _ => vector += 1,
                    }
                    let round = &traj.rounds[j];
                    let recon = cmd.reconstructed_forces();
                    let (mut err, mut norm) = (0.0, 0.0);
                    for leg in (0..p.n_legs()).filter(|&l| cmd.supporting[l]) {
                        err += (recon[leg] - round.leg_force(leg)).norm_squared();
                        norm += round.leg_force(leg).norm_squared();
                    }
                    if norm > 0.0 {
                        vjm_worst = vjm_worst.max((err / norm).sqrt());
                    }
                }
                Err(_) => unsolved += 1,
            }
        }
        for (j, round) in traj.rounds.iter().enumerate() {
            let t = traj.knots[j];
            let (com, euler) = traj.body_at(t);
            waypoint = waypoint.max((com - round.com).amax()).max((euler - round.body_euler).amax());
            for leg in 0..p.n_legs() {
                waypoint = waypoint.max((traj.toe_at(leg, t) - round.toes[leg]).amax());
            }
        }
        for (leg, segs) in traj.toes.iter().enumerate() {
            for (j, seg) in segs.iter().enumerate() {
                if !matches!(seg, ToeSegment::Swing { .. }) {
                    continue;
                }
                for k in 0..=400 {
                    let t = traj.knots[j] + (traj.knots[j + 1] - traj.knots[j]) * k as f64 / 400.0;
                    let q = traj.toe_at(leg, t);
                    for &si in &p.scene.candidate_map[leg] {
                        let surf = &p.scene.surfaces[si];
                        let d = signed_distance(surf, &q);
                        let inside = surf.solid || surf.region.contains(&q, -1e-9);
                        if inside && d < 0.0 {
                            penetration = penetration.max(-d);
                        }
                    }
                }
            }
        }
    }
    let detail = format!(
        "VJM worst relative error {vjm_worst:.2e} over {} rounds ({normal} normal, {vector} vector offsets, {unsolved} unsolved), waypoint error {waypoint:.2e} m, swing penetration {penetration:.2e} m",
        normal + vector
    );
    check(unsolved == 0 && normal + vector > 0 && vjm_worst <= 1e-6 && waypoint <= 1e-10 && penetration <= 1e-6, detail.clone(), detail)
}

fn criterion_9() -> (Outcome, Option<Solved>) {
    let run = |name: &str| {
        let c = bundled(name);
        let p = c.to_problem().unwrap();
        let r = solve_config(&p, &c).unwrap();
        Solved { problem: p, result: r }
    };
    let (four, three) = rayon::join(|| run("parallel_wall_steps_extra_round"), || run("parallel_wall_steps"));
    let tol = Tolerances::default();
    let four_ok = matches!(four.result.status, SolveStatus::Optimal | SolveStatus::Feasible)
        && check_solution(&four.result, &four.problem, &tol).report.max() <= RESIDUAL_TOL;
    let three_check = check_solution(&three.result, &three.problem, &tol);
    let three_ok = match three.result.status {
        SolveStatus::Optimal | SolveStatus::Feasible => three_check.passed(&tol),
        _ => true,
    };
    let detail = format!(
        "M=4: {} {} (max {:.2e}, {:.1} s); M=3: {} {} (max {:.2e}, oracle {:?})",
        four.result.status,
        four.result.label.text,
        four.result.residuals.max(),
        four.result.wall_time,
        three.result.status,
        three.result.label.text,
        three_check.report.max(),
        three_check.oracle_feasible
    );
    let keep = (four.result.status == SolveStatus::Optimal).then_some(four);
    (check(four_ok && three_ok, detail.clone(), detail), keep)
}

fn criterion_10() -> Outcome {
    let config = bundled("parallel_wall");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(&config, &[], a.path()).unwrap();
    let second = run_pipeline(&config, &[], b.path()).unwrap();
    let bytes_a = std::fs::read(&first.solution_path).unwrap();
    let bytes_b = std::fs::read(&second.solution_path).unwrap();
    let csv_same = std::fs::read(&first.csv_path).unwrap() == std::fs::read(&second.csv_path).unwrap();
    let detail = format!("solution files {} bytes, identical: {}, trajectory CSV identical: {csv_same}", bytes_a.len(), bytes_a == bytes_b);
    check(bytes_a == bytes_b && csv_same, detail.clone(), detail)
}

fn main() {
    let start = Instant::now();
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();

    let wall = wall_problem(true);
    let nominal = Solved { result: solve(&wall, &SolverOptions::default()).unwrap(), problem: wall.clone() };
    outcomes.push((1, "parallel-wall feasibility", criterion_1(&nominal)));

    let (c2, unswitched) = criterion_2();
    outcomes.push((2, "local-minima diversity", c2));

    let mut switching = vec![nominal];
    let more = multistart_all(&wall, &SolverOptions { multistart_count: 4, rng_seed: 1, ..Default::default() }).unwrap();
    switching.extend(more.into_iter().filter(|r| r.status == SolveStatus::Optimal).map(|result| Solved { problem: wall.clone(), result }));
    switching.retain(|s| s.result.status == SolveStatus::Optimal);
    outcomes.push((3, "switchability enforcement", criterion_3(&switching)));

    let (c9, steps) = criterion_9();
    let mut all: Vec<&Solved> = switching.iter().chain(&unswitched).collect();
    outcomes.push((4, "oracle cross-check", criterion_4(&all)));
    outcomes.push((5, "derivative suite", criterion_5()));
    all.extend(steps.iter());
    outcomes.push((6, "force-bound arithmetic", criterion_6(&all)));
    outcomes.push((7, "complementarity at convergence", criterion_7(&all)));
    outcomes.push((8, "VJM and trajectory", criterion_8(&all)));
    outcomes.push((9, "steps scenario", c9));
    outcomes.push((10, "determinism", criterion_10()));

    let mut failed = 0;
    for (n, name, o) in &outcomes {
        match o {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1} s", outcomes.len() - failed, outcomes.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
