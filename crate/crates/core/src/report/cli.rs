//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 I/O error,
//! 3 numeric failure (a non-finite loss, or a gradient check over tolerance).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::engine::LossFlags;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::gradsuite::{gradient_suite, SUITE_TOLERANCE};
use super::results::{aggregate, run_experiment, summary_table, write_experiment, RunResult};

#[derive(Debug, Parser)]
#[command(name = "evln", version, about = "Class-incremental learning with uncertainty and attention distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one task sequence and write its result files.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "results/run")]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Train every loss ablation, plus fine-tuning and distillation-only references.
    Ablate {
        config: PathBuf,
        /// Runs per row, at seeds `seed, seed + 1, ...`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "results/ablate")]
        out: PathBuf,
    },
    /// Train the configuration once per weight of the uncertainty and attention terms.
    SweepLambda {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "results/sweep")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences for every op,
    /// every loss and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate every result file below a directory into summary CSVs.
    Report { dir: PathBuf },
}

/// Loss ablation rows: label and flags. Every row keeps temperature
/// distillation except the fine-tuning reference.
pub const ABLATIONS: [(&str, LossFlags); 7] = [
    ("ft", LossFlags::none()),
    ("ld", LossFlags::distillation_only()),
    ("au", LossFlags { use_distillation: true, use_aleatoric: true, use_uncertainty_distill: false, use_attention_distill: false }),
    ("ad", LossFlags { use_distillation: true, use_aleatoric: false, use_uncertainty_distill: false, use_attention_distill: true }),
    ("au+ud", LossFlags { use_distillation: true, use_aleatoric: true, use_uncertainty_distill: true, use_attention_distill: false }),
    ("au+ad", LossFlags { use_distillation: true, use_aleatoric: true, use_uncertainty_distill: false, use_attention_distill: true }),
    ("au+ud+ad", LossFlags::all()),
];

/// Directory name for a sweep value.
pub fn lambda_label(lambda: f64) -> String {
    format!("lambda={lambda}")
}

fn run_one(cfg: &RunConfig, label: &str, dir: &Path) -> Result<RunResult> {
    let exp = run_experiment(cfg, label)?;
    write_experiment(dir, cfg, &exp)?;
    println!(
        "{label:<10} seed {:<4} ACC {:.4}  FGT {:.4}  {:.1}s  -> {}",
        cfg.seed,
        exp.result.acc,
        exp.result.fgt,
        exp.result.wall_time_s,
        dir.display()
    );
    Ok(exp.result)
}

fn seeds_of(cfg: &RunConfig, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    Ok((0..n).map(|k| cfg.seed + k).collect())
}

fn finish_grid(out: &Path) -> Result<()> {
    let summaries = aggregate(out)?;
    print!("{}", summary_table(&summaries));
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out, seed, label } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            run_one(&cfg, &label, &out)?;
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            for seed in seeds_of(&cfg, seeds)? {
                for (label, flags) in ABLATIONS {
                    let run = cfg.with_seed(seed).with_flags(flags);
                    run_one(&run, label, &out.join(label).join(format!("seed-{seed}")))?;
                }
            }
            finish_grid(&out)?;
        }
        Command::SweepLambda { config, values, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let grid = values.iter().map(|&v| cfg.with_lambda(v)).collect::<Result<Vec<_>>>()?;
            for seed in seeds_of(&cfg, seeds)? {
                for (run, &v) in grid.iter().zip(&values) {
                    let label = lambda_label(v);
                    run_one(&run.with_seed(seed), &label, &out.join(&label).join(format!("seed-{seed}")))?;
                }
            }
            finish_grid(&out)?;
        }
        Command::Gradcheck { seed } => {
            let entries = gradient_suite(seed)?;
            let mut worst = 0.0f64;
            for e in &entries {
                let verdict = if e.max_rel_error < SUITE_TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<26} {:>6} components  max rel. error {:.3e}  {verdict}", e.name, e.checked, e.max_rel_error);
                worst = worst.max(e.max_rel_error);
            }
            if !(worst < SUITE_TOLERANCE) {
                return Err(Error::Numeric(format!(
                    "largest relative gradient error {worst:.3e} exceeds {SUITE_TOLERANCE:e}"
                )));
            }
        }
        Command::Report { dir } => finish_grid(&dir)?,
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("evln: {e}");
            e.exit_code()
        }
    }
}
