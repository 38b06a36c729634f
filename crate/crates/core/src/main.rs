use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use propd::cli::{self, Axis, RunConfig};
use propd::selftest;

#[derive(Parser, Debug)]
#[command(name = "propd", version, about = "Parallel decoding with early pruning and dynamic token trees")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decode the configured workload and write transcripts, metrics and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[output] dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides `[backend] seed`.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Also dump acceptance statistics, cost-model state and planning events.
        #[arg(long)]
        verbose: bool,
    },
    /// One summary row per value of an axis, each with speedup over autoregressive decoding.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        verbose: bool,
    },
    /// Run the built-in oracle suites at reduced scale.
    Selftest {
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        verbose: bool,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(config)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Args::parse().command {
        Command::Run {
            config,
            out_dir,
            seed_override,
            verbose,
        } => {
            let cfg = load(&config, seed_override)?;
            let report = cli::execute(&cfg)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
            cli::write_run(&report, &cfg.output, &dir, verbose)
                .with_context(|| format!("writing results to {}", dir.display()))?;
            let s = &report.output.summary;
            println!(
                "{}: {} tokens in {} iterations, {:.1} tok/s, acceptance {:.3}, prune rate {:.1}%, tree size {:.1}",
                s.mode,
                s.tokens,
                s.iterations,
                s.tokens_per_sec,
                s.mean_acceptance_length,
                100.0 * s.mean_prune_rate,
                s.mean_tree_size
            );
            if verbose {
                eprintln!("wrote {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            out_dir,
            seed_override,
            verbose,
        } => {
            let cfg = load(&config, seed_override)?;
            let rows = cli::sweep(&cfg, axis)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(format!("sweep_{}.csv", axis.name()));
            std::fs::write(&path, cli::sweep_csv(&rows)?).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", cli::sweep_table(&rows));
            if verbose {
                eprintln!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { seed_override, verbose } => {
            let reports = selftest::run_all(seed_override.unwrap_or(0));
            let mut ok = true;
            for r in &reports {
                ok &= r.passed;
                let status = if r.passed { "PASS" } else { "FAIL" };
                if verbose || !r.passed {
                    println!("{status} {}: {}", r.name, r.detail);
                } else {
                    println!("{status} {}", r.name);
                }
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
