use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ratecost_cli::commands::{self, Format, Outcome, RunOptions};
use ratecost_cli::config::ExperimentConfig;

/// Rate-cost bounds and closed-loop DPCM simulations for linear control.
#[derive(Parser)]
#[command(name = "ratecost", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also write `sweep.svg`.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Evaluate the requested bounds on the cost grid.
    Bound,
    /// Simulate the closed loop at one distortion for each seed.
    Simulate,
    /// Simulate across the distortion grid and pair points with the bounds.
    Sweep,
    /// Split the simulated cost into its separation terms.
    Decompose,
    /// Check the config and plant and print the solved quantities.
    Validate,
}

/// Caps rayon's pool when `RATECOST_THREADS` is set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RATECOST_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("RATECOST_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Outcome> {
    configure_threads()?;
    let path = cli.config.as_ref().context("--config <path> is required")?;
    let cfg = ExperimentConfig::load(path)?;
    let opts = RunOptions {
        seed: cli.seed,
        format: cli.format,
        svg: cli.svg,
    };
    if opts.svg && !matches!(cli.command, Command::Sweep) {
        eprintln!("note: --svg only applies to sweep");
    }
    let outcome = match cli.command {
        Command::Bound => commands::bound(&cfg, &opts)?,
        Command::Simulate => commands::simulate(&cfg, &opts)?,
        Command::Sweep => commands::sweep(&cfg, &opts)?,
        Command::Decompose => commands::decompose(&cfg, &opts)?,
        Command::Validate => commands::validate_config(&cfg, &opts)?,
    };
    let dir = cli.out.clone().or_else(|| cfg.output.dir.clone());
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, bytes) in &outcome.files {
                let p = dir.join(name);
                std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        None if outcome.files.iter().any(|(n, _)| n.extension().is_some_and(|e| e == "svg" || e == "bin")) => {
            eprintln!("note: plots and index streams are only written with --out or output.dir");
        }
        None => {}
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            if outcome.hard_failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.hard_failures {
                    eprintln!("hard check failed: {f}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
