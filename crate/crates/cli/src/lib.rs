//! Batch front end for the climbplan planner: scenario configs in, solution
//! files, trajectory CSV and summary lines out.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use climbplan::formulation::{PlanProblem, ResidualReport, RoundState};
use climbplan::solver::{multistart, solve, SolveResult, SolveStatus, StageRecord};
use climbplan::trajectory::{interpolate_result, round_deflections, write_csv, DeflectionCommand, DeflectionModel, DeflectionOptions};
use climbplan::verify::{check_solution, AmbiguousContact, SolutionCheck, Tolerances};
use serde::Serialize;
use thiserror::Error;

pub use config::ScenarioConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Bundled scenario configs, `(file stem, contents)`.
pub const BUNDLED_CONFIGS: [(&str, &str); 6] = [
    ("parallel_wall", include_str!("../configs/parallel_wall.toml")),
    ("parallel_wall_steps", include_str!("../configs/parallel_wall_steps.toml")),
    ("parallel_wall_steps_extra_round", include_str!("../configs/parallel_wall_steps_extra_round.toml")),
    ("parallel_wall_incline", include_str!("../configs/parallel_wall_incline.toml")),
    ("tube_exit", include_str!("../configs/tube_exit.toml")),
    ("flat_ground", include_str!("../configs/flat_ground.toml")),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Internal(_) => EXIT_INTERNAL,
        }
    }
}

/// Exit code for a solve status. Only plans meeting the tolerance count as
/// success.
pub fn status_exit_code(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Optimal | SolveStatus::Feasible => EXIT_OK,
        _ => EXIT_INFEASIBLE,
    }
}

/// Everything written to the solution file. Wall time is left out so that
/// equal inputs give equal files.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionFile {
    pub overrides: Vec<String>,
    pub config: ScenarioConfig,
    pub status: SolveStatus,
    pub label: String,
    pub moved: Vec<Vec<&'static str>>,
    pub ambiguous: Vec<AmbiguousContact>,
    pub objective: f64,
    pub residuals: ResidualReport,
    pub worst_family: &'static str,
    pub oracle_feasible: Vec<bool>,
    pub iterations: usize,
    pub start_index: usize,
    pub stages: Vec<StageRecord>,
    /// Round 0 is the initial stance. SI units.
    pub rounds: Vec<RoundState<f64>>,
    /// Per round, the commanded spring deflections, or the reason the
    /// deflection system has no solution.
    pub deflections: Vec<Result<DeflectionRecord, String>>,
}

/// Toe offsets realising one round's contact forces. SI units.
#[derive(Debug, Clone, Serialize)]
pub struct DeflectionRecord {
    pub model: DeflectionModel,
    /// Per leg.
    pub delta_wall: Vec<[f64; 3]>,
    pub delta_com: [f64; 3],
    /// Offset component along the contact normal per leg.
    pub penetration: Vec<f64>,
    pub relative_residual: f64,
}

impl From<&DeflectionCommand> for DeflectionRecord {
    fn from(c: &DeflectionCommand) -> Self {
        Self {
            model: c.model,
            delta_wall: c.delta_wall.iter().map(|v| [v.x, v.y, v.z]).collect(),
            delta_com: [c.delta_com.x, c.delta_com.y, c.delta_com.z],
            penetration: c.penetration.clone(),
            relative_residual: c.relative_residual,
        }
    }
}

/// Result of one pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub problem: PlanProblem<f64>,
    pub result: SolveResult,
    pub check: SolutionCheck,
    pub solution_path: PathBuf,
    pub csv_path: PathBuf,
    /// Non-fatal problem warnings, such as safety factors below one.
    pub warnings: Vec<String>,
}

impl RunOutcome {
    /// `status label objective max_residual wall_time`
    pub fn summary(&self) -> String {
        summary_line(&self.result)
    }

    pub fn exit_code(&self) -> i32 {
        status_exit_code(self.result.status)
    }
}

pub fn summary_line(r: &SolveResult) -> String {
    format!("{} {} {:.6} {:.3e} {:.3}", r.status, r.label.text, r.objective, r.residuals.max(), r.wall_time)
}

/// Solve with a single start, or the best of several starts.
pub fn solve_config(problem: &PlanProblem<f64>, config: &ScenarioConfig) -> Result<SolveResult, CliError> {
    let internal = |e: climbplan::Error| CliError::Internal(e.to_string());
    if config.solver.multistart_count > 1 {
        multistart(problem, &config.solver)
            .map_err(internal)?
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Internal("multistart returned no result".into()))
    } else {
        solve(problem, &config.solver).map_err(internal)
    }
}

/// Solve, verify, label, interpolate, and write the solution file and CSV
/// into `out_dir`.
pub fn run_pipeline(config: &ScenarioConfig, overrides: &[String], out_dir: &Path) -> Result<RunOutcome, CliError> {
    let problem = config.to_problem()?;
    let warnings = problem.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let result = solve_config(&problem, config)?;
    let check = check_solution(&result, &problem, &Tolerances::default());
    let traj_opts = config.trajectory_options();
    let trajectory = interpolate_result(&result, &problem, &traj_opts).map_err(|e| CliError::Internal(e.to_string()))?;
    let deflections = round_deflections(&trajectory, &problem, &DeflectionOptions::default());

    let file = SolutionFile {
        overrides: overrides.to_vec(),
        config: config.clone(),
        status: result.status,
        label: result.label.text.clone(),
        moved: result.label.moved_names(),
        ambiguous: result.label.ambiguous.clone(),
        objective: result.objective,
        residuals: result.residuals,
        worst_family: result.residuals.worst().0,
        oracle_feasible: check.oracle_feasible.clone(),
        iterations: result.iterations,
        start_index: result.start_index,
        stages: result.stages.clone(),
        rounds: trajectory.rounds.clone(),
        deflections: deflections.iter().map(|d| d.as_ref().map(DeflectionRecord::from).map_err(|e| e.to_string())).collect(),
    };

    let io = |e: std::io::Error| CliError::Internal(format!("writing output: {e}"));
    fs::create_dir_all(out_dir).map_err(io)?;
    let name = config.output_name();
    let solution_path = out_dir.join(format!("{name}.solution.json"));
    let csv_path = out_dir.join(format!("{name}.trajectory.csv"));
    let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&solution_path, json + "\n").map_err(io)?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &trajectory, &deflections, &traj_opts).map_err(io)?;
    fs::write(&csv_path, csv).map_err(io)?;

    Ok(RunOutcome { problem, result, check, solution_path, csv_path, warnings })
}

/// Keys accepted by [`run_sweep`].
pub const SWEEP_KEYS: [&str; 4] = ["s_mu", "s_tau", "rounds", "switchability"];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub outcome: Result<RunOutcome, String>,
}

/// Runs the pipeline once per value with everything else fixed, and writes
/// `<name>.sweep.csv` with one row per value in the given order.
pub fn run_sweep(
    config: &ScenarioConfig,
    overrides: &[String],
    key: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<(Vec<SweepRow>, PathBuf), CliError> {
    use rayon::prelude::*;
    if !SWEEP_KEYS.contains(&key) {
        return Err(CliError::Config(format!("cannot sweep `{key}`; expected one of {}", SWEEP_KEYS.join(", "))));
    }
    let mut configs = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut c = config.clone();
        c.apply_override(key, v)?;
        c.output.name = Some(format!("{}_{key}_{i}", config.output_name()));
        c.to_problem()?;
        configs.push(c);
    }
    let rows: Vec<SweepRow> = configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, v)| {
            let mut ov = overrides.to_vec();
            ov.push(format!("{key}={v}"));
            SweepRow { value: v.clone(), outcome: run_pipeline(c, &ov, out_dir).map_err(|e| e.to_string()) }
        })
        .collect();

    let mut table = String::from("value,status,label,objective,max_residual\n");
    for row in &rows {
        match &row.outcome {
            Ok(o) => table.push_str(&format!(
                "{},{},{},{},{}\n",
                row.value,
                o.result.status,
                o.result.label.text,
                o.result.objective,
                o.result.residuals.max()
            )),
            Err(e) => table.push_str(&format!("{},error,,,{}\n", row.value, e.replace(',', ";"))),
        }
    }
    let path = out_dir.join(format!("{}.sweep.csv", config.output_name()));
    fs::create_dir_all(out_dir).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&path, table).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok((rows, path))
}

/// Writes the one-line summary and, for unsuccessful runs, the worst
/// residual family.
pub fn report<W: Write, E: Write>(outcome: &RunOutcome, out: &mut W, err: &mut E) {
    for w in &outcome.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let _ = writeln!(out, "{}", outcome.summary());
    if outcome.exit_code() != EXIT_OK {
        let (family, v) = outcome.result.residuals.worst();
        let _ = writeln!(err, "no plan within tolerance: worst constraint family `{family}` violated by {v:.3e}");
    }
    if !outcome.check.oracle_feasible.iter().all(|&f| f) {
        let _ = writeln!(err, "warning: equilibrium oracle rejects rounds {:?}", outcome.check.oracle_feasible);
    }
}
