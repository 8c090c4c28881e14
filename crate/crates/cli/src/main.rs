//! `srlab` — experiment driver for exact successor-representation studies.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config error, 3 bound violation
//! in the proven regime, 4 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use srlab::harness::{self, ExperimentConfig};
use srlab::Error;

#[derive(Parser)]
#[command(name = "srlab", version, about = "Exact successor-representation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stable rank, entropy and leading singular values over (k, γ).
    SpectrumSweep(Common),
    /// FB training grid over (k, d, γ, seed) with seed aggregates.
    Ablation(Common),
    /// Singular-value bound audits over random instance classes.
    BoundsAudit(Common),
    /// SR row or Q-value heatmap on a gridworld.
    Heatmap(Common),
    /// Train a single FB cell and persist the artifact.
    TrainFb(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as `0,1,2` or a half-open range `0..50`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().context("range start")?;
        let b: u64 = b.trim().parse().context("range end")?;
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = parse_seeds(seeds).map_err(|e| Error::Config(format!("--seeds: {e:#}")))?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(std::env::current_dir().map_or(out.clone(), |cwd| cwd.join(out)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::SpectrumSweep(c) => {
            let cfg = load(&c)?;
            let out = harness::cmd_spectrum_sweep(&cfg, c.threads)?;
            println!("{} rows -> {}", out.rows.len(), out.path.display());
        }
        Command::Ablation(c) => {
            let cfg = load(&c)?;
            let out = harness::cmd_ablation(&cfg, c.threads)?;
            let diverged: usize = out.aggregates.iter().map(|a| a.n_diverged).sum();
            println!(
                "{} cells ({diverged} diverged) -> {}",
                out.cells.len(),
                out.path.display()
            );
        }
        Command::BoundsAudit(c) => {
            let cfg = load(&c)?;
            let out = harness::cmd_bounds_audit(&cfg, c.threads)?;
            println!(
                "{} instances, {} violations, {} findings -> {}",
                out.cells.len(),
                out.violations(),
                out.findings(),
                out.path.display()
            );
            if let Some(gap) = &out.gap {
                println!(
                    "gap audit: {} reports, certificate violations {}, approx-bound coverage {:.4}, decomposed-bound coverage {:.4}",
                    gap.rows.len(),
                    gap.certificate_violations,
                    gap.approx_bound_coverage(),
                    gap.decomposed_bound_coverage()
                );
            }
            if out.violations() > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Heatmap(c) => {
            let cfg = load(&c)?;
            let map = harness::cmd_heatmap(&cfg)?;
            println!("{} heatmap -> {}", map.source.as_str(), map.path.display());
        }
        Command::TrainFb(c) => {
            let cfg = load(&c)?;
            let out = harness::cmd_train_fb(&cfg)?;
            println!(
                "eps_real {:.6}, bellman {:.6} -> {:.6}, final loss {:.6} -> {}",
                out.eps_real,
                out.initial_bellman,
                out.final_bellman,
                out.final_loss,
                out.artifact.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(4),
                _ => ExitCode::from(1),
            }
        }
    }
}
