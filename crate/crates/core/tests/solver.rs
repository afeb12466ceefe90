use climbplan::scene::ScenarioParams;
use climbplan::setup::standard_problem;
use climbplan::solver::{multistart, solve, SolverOptions};
use climbplan::verify::{check_solution, Tolerances};
use climbplan::{Error, PlanProblem, SolveStatus};
use nalgebra::Vector3;

fn flat() -> PlanProblem {
    standard_problem("flat_ground", &ScenarioParams::default()).unwrap()
}

#[test]
fn flat_ground_walk_is_certified() {
    let p = flat();
    let r = solve(&p, &SolverOptions::default()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert_eq!(r.rounds.len(), p.rounds);
    let last = r.rounds.last().unwrap();
    for (toe, target) in last.toes.iter().zip(&p.targets.toes) {
        assert!((toe - target).norm() <= p.terminal_tolerance + 1e-6);
    }
    let check = check_solution(&r, &p, &Tolerances::default());
    assert!(check.passed(&Tolerances::default()), "{check:?}");
}

#[test]
fn standing_still_needs_no_motion() {
    let mut p = flat();
    p.rounds = 1;
    p.targets.toes = p.initial_stance.toes.clone();
    let r = solve(&p, &SolverOptions::default()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!(r.label.moved_names().iter().all(|m| m.is_empty()), "{:?}", r.label);
    for (a, b) in r.rounds[0].toes.iter().zip(&p.initial_stance.toes) {
        assert!((a - b).norm() < 1e-3);
    }
}

#[test]
fn unreachable_targets_are_not_reported_as_success() {
    let mut p = flat();
    for t in &mut p.targets.toes {
        *t += Vector3::new(1.5, 0.0, 0.0);
    }
    let opts = SolverOptions { time_budget: 30.0, ..Default::default() };
    let r = solve(&p, &opts).unwrap();
    assert!(!matches!(r.status, SolveStatus::Optimal | SolveStatus::Feasible), "{}", r.status);
    assert!(r.residuals.max() > opts.kkt_tolerance);
}

#[test]
fn equal_seeds_give_equal_plans() {
    let p = flat();
    let opts = SolverOptions { rng_seed: 7, ..Default::default() };
    let a = solve(&p, &opts).unwrap();
    let b = solve(&p, &opts).unwrap();
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert_eq!(format!("{:?}", a.stages), format!("{:?}", b.stages));
}

#[test]
fn single_start_multistart_matches_solve() {
    let p = flat();
    let opts = SolverOptions { rng_seed: 3, ..Default::default() };
    let single = solve(&p, &opts).unwrap();
    let multi = multistart(&p, &opts).unwrap();
    assert_eq!(multi.len(), 1);
    assert_eq!(multi[0].rounds, single.rounds);
    assert_eq!(multi[0].status, single.status);
}

#[test]
fn multistart_orders_best_first() {
    let p = flat();
    let opts = SolverOptions { multistart_count: 3, ..Default::default() };
    let all = multistart(&p, &opts).unwrap();
    for w in all.windows(2) {
        assert!(w[0].status <= w[1].status);
        if w[0].status == w[1].status {
            assert!(w[0].objective <= w[1].objective);
        }
    }
}

#[test]
fn invalid_options_are_rejected() {
    let p = flat();
    let opts = SolverOptions { complementarity_schedule: vec![1e-2, 1e-1], ..Default::default() };
    assert!(matches!(solve(&p, &opts), Err(Error::InvalidOptions(_))));
    let opts = SolverOptions { multistart_count: 0, ..Default::default() };
    assert!(matches!(solve(&p, &opts), Err(Error::InvalidOptions(_))));
}
