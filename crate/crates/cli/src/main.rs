use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use climbplan_cli::config::parse_switch;
use climbplan_cli::{report, run_pipeline, run_sweep, CliError, ScenarioConfig, EXIT_INFEASIBLE, EXIT_OK};

/// Plan a transition motion for a multi-limbed climbing robot.
#[derive(Debug, Parser)]
#[command(name = "climbplan", version)]
struct Args {
    /// Scenario config (TOML, lengths in mm). Optional when --scenario names
    /// a bundled scenario.
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "s-mu")]
    s_mu: Option<f64>,
    #[arg(long = "s-tau")]
    s_tau: Option<f64>,
    /// on | off
    #[arg(long)]
    switchability: Option<String>,
    #[arg(long)]
    multistart: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Solver tolerance on normalized residuals.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// key=v1,v2,... with key one of s_mu, s_tau, rounds, switchability.
    #[arg(long)]
    sweep: Option<String>,
}

fn overrides(args: &Args) -> Result<Vec<(String, String)>, CliError> {
    if let Some(s) = &args.switchability {
        parse_switch(s).ok_or_else(|| CliError::Config(format!("--switchability expects on or off, got `{s}`")))?;
    }
    let pairs = [
        ("scenario", args.scenario.clone()),
        ("rounds", args.rounds.map(|v| v.to_string())),
        ("s_mu", args.s_mu.map(|v| v.to_string())),
        ("s_tau", args.s_tau.map(|v| v.to_string())),
        ("switchability", args.switchability.clone()),
        ("multistart", args.multistart.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("tolerance", args.tolerance.map(|v| v.to_string())),
    ];
    Ok(pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect())
}

fn run(args: Args) -> Result<i32, CliError> {
    let mut config = match (&args.config, &args.scenario) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Some(name)) => ScenarioConfig::for_scenario(name),
        (None, None) => return Err(CliError::Config("give a config file or --scenario".into())),
    };
    let pairs = overrides(&args)?;
    for (k, v) in &pairs {
        config.apply_override(k, v)?;
    }
    let logged: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let out_dir = args.out_dir.clone().or_else(|| config.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));

    if let Some(spec) = &args.sweep {
        let (key, values) =
            spec.split_once('=').ok_or_else(|| CliError::Config(format!("--sweep expects key=v1,v2,..., got `{spec}`")))?;
        let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Config("--sweep needs at least one value".into()));
        }
        let (rows, path) = run_sweep(&config, &logged, key, &values, &out_dir)?;
        let mut code = EXIT_OK;
        for row in &rows {
            match &row.outcome {
                Ok(o) => {
                    println!("{key}={} {}", row.value, o.summary());
                    if o.exit_code() != EXIT_OK {
                        code = code.max(EXIT_INFEASIBLE);
                    }
                }
                Err(e) => {
                    eprintln!("{key}={}: {e}", row.value);
                    code = code.max(climbplan_cli::EXIT_INTERNAL);
                }
            }
        }
        eprintln!("sweep table written to {}", path.display());
        return Ok(code);
    }

    let outcome = run_pipeline(&config, &logged, &out_dir)?;
    report(&outcome, &mut std::io::stdout(), &mut std::io::stderr());
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(climbplan_cli::EXIT_CONFIG as u8),
            };
        }
    };
    let code = match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
