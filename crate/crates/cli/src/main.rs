mod compare;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use experiment::{load, run_dir_name, run_one, Overrides};
use fedsim::sim::SimConfig;

/// Caps the worker threads used for per-participant work.
const THREADS_VAR: &str = "CAESAR_SIM_THREADS";

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs; exit status 1.
    Config(String),
    /// The run itself failed; exit status 2.
    Runtime(String),
}

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning compression simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment once per seed and write metrics for each run.
    Run {
        /// JSON experiment file.
        #[arg(long)]
        config: PathBuf,
        /// Replace the file's strategy (caesar, fedavg, fic, cac).
        #[arg(long)]
        strategy: Option<String>,
        /// Run this seed only.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the file's `output`, then `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Report rounds, traffic and time to a target accuracy.
    Compare {
        /// Run directories holding metrics.csv.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long = "target-acc")]
        target_acc: f64,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(config: PathBuf, overrides: Overrides, out: Option<PathBuf>, quiet: bool) -> Result<(), Failure> {
    let exp = load(&config, &overrides)?;
    let out = out.or(exp.output).unwrap_or_else(|| PathBuf::from("runs"));
    let pool = thread_pool()?;
    for &seed in &exp.seeds {
        let cfg = SimConfig { seed, ..exp.base.clone() };
        let dir = out.join(run_dir_name(&cfg));
        let series = pool.install(|| run_one(&cfg, &dir))?;
        if !quiet {
            let last = series.last().expect("at least one round");
            println!(
                "{}: {} rounds, accuracy {:.4}, traffic {} bits, time {:.1} s -> {}",
                run_dir_name(&cfg),
                series.len(),
                last.accuracy,
                last.cum_traffic_bits(),
                last.cum_time_s,
                dir.display()
            );
        }
    }
    Ok(())
}

fn compare_runs(runs: Vec<PathBuf>, target: f64, json: Option<PathBuf>) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Failure::Config(format!("--target-acc {target} outside [0, 1]")));
    }
    let reports = runs.iter().map(|d| compare::report(d, target)).collect::<Result<Vec<_>, _>>()?;
    print!("{}", compare::table(&reports, target));
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            strategy,
            seed,
            out,
            quiet,
        } => run(config, Overrides { strategy, seed }, out, quiet),
        Command::Compare { runs, target_acc, json } => compare_runs(runs, target_acc, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
