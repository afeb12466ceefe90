//! Solves a bundled scenario and prints the stage log and force table.
//!
//! `cargo run --release --example plan -- [scenario] [seed]`

use climbplan::scene::ScenarioParams;
use climbplan::setup::standard_problem;
use climbplan::solver::{solve_logged, SolverOptions};
use climbplan::verify::{check_solution, normal_force_table, Tolerances};

fn main() -> climbplan::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "parallel_wall".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let problem = standard_problem(&name, &ScenarioParams::default())?;
    let options = SolverOptions { rng_seed: seed, ..Default::default() };
    let r = solve_logged(&problem, &options, &mut std::io::stderr())?;
    let check = check_solution(&r, &problem, &Tolerances::default());

    println!("{} {} objective {:.6} max residual {:.3e} ({:.2} s)", r.status, r.label.text, r.objective, r.residuals.max(), r.wall_time);
    println!("moved per round: {:?}", r.label.moved_names());
    println!("oracle: {:?}", check.oracle_feasible);
    for (j, row) in normal_force_table(&problem, &r.rounds).iter().enumerate() {
        let row: Vec<String> = row.iter().map(|f| format!("{f:7.2}")).collect();
        println!("round {j}: {}", row.join(" "));
    }
    Ok(())
}
