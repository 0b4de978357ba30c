use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ttamon::acceptance::{Scale, Suite};
use ttamon::config::{ConfigError, ExperimentConfig};
use ttamon::output::resolve_out_dir;
use ttamon::runner::{compare_alarms, Experiment, RunError, RunSummary};
use ttamon_core::monitor::AlarmKind;

/// Unsupervised risk monitoring for test-time adaptation on synthetic streams.
#[derive(Parser)]
#[command(name = "ttamon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-step CSV files plus a summary JSON.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Base seed; repetition k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of repetitions.
        #[arg(long)]
        reps: Option<usize>,
        /// Output directory, overriding TTAMON_OUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment and fail if L_b > L_a at any step with delta_hat >= 0.
    Compare {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the acceptance suite at reduced repetitions.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            reps,
            out,
        } => run(&config, seed, reps, out.as_deref()),
        Command::Compare { config } => compare(&config),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path, seed: Option<u64>, reps: Option<usize>) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(reps) = reps {
        config.repetitions = reps;
    }
    config.validate()?;
    Ok(config)
}

fn run(
    path: &Path,
    seed: Option<u64>,
    reps: Option<usize>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let config = load(path, seed, reps)?;
    let dir = resolve_out_dir(&config, out);
    let summary = Experiment::new(config)?.run_to_dir(&dir, false)?;
    print_summary(&summary, &dir);
    Ok(())
}

fn compare(path: &Path) -> Result<(), Failure> {
    let config = load(path, None, None)?;
    let dir = resolve_out_dir(&config, None);
    let report = compare_alarms(&config, &dir)?;
    print_summary(&report.summary, &dir);
    println!(
        "ordering L_b <= L_a held on all {} of {} rows with delta_hat >= 0",
        report.rows_checked, report.rows_total
    );
    if report.detection_order_violations.is_empty() {
        println!("t_min(Phi^a) <= t_min(Phi^b) on every repetition");
    } else {
        println!(
            "Phi^b fired before Phi^a in repetitions {:?}",
            report.detection_order_violations
        );
    }
    Ok(())
}

fn selftest() -> Result<(), Failure> {
    let verdicts = Suite::new(Scale::REDUCED).run_all(|v| println!("{v}"))?;
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!(
        "selftest: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} acceptance criteria failed"
        )));
    }
    Ok(())
}

fn print_summary(summary: &RunSummary, dir: &Path) {
    println!(
        "{} (config {}) -> {}",
        summary.name,
        &summary.config_hash[..12],
        dir.display()
    );
    if summary.source_not_converged {
        println!("warning: source training did not converge");
    }
    for rep in &summary.repetitions {
        let alarms: Vec<String> = AlarmKind::ALL
            .iter()
            .filter_map(|&k| rep.alarm(k))
            .map(|a| match a.t_min {
                Some(t) => format!("{} fired at {t}", a.alarm.symbol()),
                None => format!("{} quiet", a.alarm.symbol()),
            })
            .collect();
        println!(
            "  rep {} seed {}: {} steps, U {:.4}, risk {:.4}; {}",
            rep.rep,
            rep.seed,
            rep.steps,
            rep.source.u_hat,
            rep.risk.last,
            alarms.join(", ")
        );
    }
}
