use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sketchysgd::harness::{self, JobStatus, Overrides};

/// Run SketchySGD experiments from a JSON config.
///
/// The worker-thread count for parallel jobs is read from SKETCHYSGD_THREADS.
/// Exit status: 0 ok, 2 config error, 3 runtime error or divergence, 4 cap exceeded.
#[derive(Parser)]
#[command(name = "sketchysgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (optimizer, seed) job and write metrics CSVs plus a manifest.
    Run(Common),
    /// Write spectrum reports before and after preconditioning.
    Diagnose(Common),
    /// Check the config and print it with every "auto" field resolved.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_passes: Option<f64>,
    /// Replace the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            output_dir: self.output_dir.clone(),
            max_passes: self.max_passes,
            seed: self.seed,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => harness::cmd_run(&c.config, &c.overrides()).map(|summary| {
            for o in &summary.outcomes {
                match &o.status {
                    JobStatus::Completed => println!("{}", o.csv.display()),
                    JobStatus::Diverged { iteration } => {
                        eprintln!("{} diverged at iteration {iteration}; partial metrics in {}", o.job.label, o.csv.display())
                    }
                    JobStatus::Failed { message } => eprintln!("{} seed {} failed: {message}", o.job.label, o.job.seed),
                }
            }
            println!("{}", summary.manifest.display());
            if summary.failed() {
                3
            } else {
                0
            }
        }),
        Command::Diagnose(c) => harness::cmd_diagnose(&c.config, &c.overrides()).map(|outputs| {
            for o in outputs {
                println!("{}", o.csv.display());
                println!("{}", o.json.display());
            }
            0
        }),
        Command::Validate(c) => harness::cmd_validate(&c.config, &c.overrides()).map(|json| {
            println!("{json}");
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
