//! `ddn`: run continual-learning experiments and numerical checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ddn_core::experiment::checks::{
    check_hypergrad, check_reservoir, check_theorems, HypergradCheckOptions, ReservoirCheckOptions,
    TheoremCheckOptions,
};
use ddn_core::experiment::{self, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "ddn", version, about = "Replay with learned soft labels: experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured seed and write metrics, diagnostics and checkpoints.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds or ranges, e.g. `1-10` (overrides `seeds`).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Compare the analytic hypergradient with finite differences.
    CheckHypergrad {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Measure the convergence order of the first-order gradient-matching identity.
    CheckTheorems {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use inner targets equal to the model's own predictions.
        #[arg(long)]
        zero_gradient: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Test reservoir inclusion frequencies against the uniform law.
    CheckReservoir {
        #[arg(long, default_value_t = 5)]
        capacity: usize,
        #[arg(long, default_value_t = 20)]
        stream_len: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

/// Failures are either bad input (exit 1) or something going wrong at run
/// time, including a failed check (exit 2).
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(e: ddn_core::Error) -> Failure {
    match e {
        ddn_core::Error::InvalidConfig { .. } => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = match &args.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Validation)?,
        ),
        None => None,
    };
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    match experiment::load(text.as_deref(), &overrides) {
        Ok((_, cfg)) => Ok(cfg),
        Err(e @ ddn_core::Error::Parse { .. }) => Err(Failure::Validation(e.into())),
        Err(e) => Err(classify(e)),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    println!("{s}");
    Ok(())
}

fn verdict(pass: bool) -> Result<(), Failure> {
    println!("{}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("check failed")))
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { cfg, out, seeds } => {
            let mut extra = Vec::new();
            if let Some(o) = out {
                extra.push(format!("output_dir={}", o.display()));
            }
            if let Some(s) = seeds {
                extra.push(format!("seeds={s}"));
            }
            let config = load_config(&cfg, &extra)?;
            let report = experiment::run(&config).map_err(classify)?;
            for s in &report.strategies {
                println!(
                    "{:<16} ACC {:6.2} ± {:5.2}   FM {:6.2} ± {:5.2}   ({} seeds)",
                    s.strategy,
                    s.acc_mean,
                    s.acc_std,
                    s.fm_mean,
                    s.fm_std,
                    s.seeds.len()
                );
            }
            if let Some(c) = &report.comparison {
                println!(
                    "{} vs {}: ACC wins {}/{} (sign test p = {:.4}), mean FM change {:+.2}",
                    c.candidate,
                    c.baseline,
                    c.acc_sign_test.wins,
                    c.acc_sign_test.wins + c.acc_sign_test.losses + c.acc_sign_test.ties,
                    c.acc_sign_test.p_value,
                    c.fm_mean_diff
                );
            }
            println!("wrote {}", config.output_dir.display());
            Ok(())
        }
        Command::CheckHypergrad {
            cfg,
            instances,
            seed,
            json,
        } => {
            let config = load_config(&cfg, &[])?;
            let opts = HypergradCheckOptions {
                instances,
                seed,
                eta: config.trainer.meta.eta,
                alpha: config.trainer.strategy.alpha,
                beta: config.trainer.beta,
                ..HypergradCheckOptions::default()
            };
            let report = check_hypergrad(&opts).map_err(classify)?;
            if json {
                print_json(&report)?;
            }
            println!(
                "hypergradient check: {} instances, eta={} alpha={} beta={}",
                opts.instances, opts.eta, opts.alpha, opts.beta
            );
            println!("max relative error: {:.3e} (tolerance {:.0e})", report.max_error, opts.tolerance);
            println!("max hypergradient norm: {:.6e}", report.max_grad_norm);
            verdict(report.pass)
        }
        Command::CheckTheorems {
            cfg,
            zero_gradient,
            seed,
            json,
        } => {
            let config = load_config(&cfg, &[])?;
            let opts = TheoremCheckOptions {
                seed,
                zero_gradient,
                alpha: config.trainer.strategy.alpha,
                ..TheoremCheckOptions::default()
            };
            let report = check_theorems(&opts).map_err(classify)?;
            if json {
                print_json(&report)?;
            }
            println!("{:>10} {:>16} {:>16} {:>14}", "eta", "outer change", "gm_objective", "residual");
            for p in &report.points {
                println!(
                    "{:>10.0e} {:>16.8e} {:>16.8e} {:>14.6e}",
                    p.eta, p.outer_change, p.gm_objective, p.residual
                );
            }
            match report.min_order {
                Some(o) => println!("observed order: {o:.4} (required ≥ {})", opts.min_order),
                None => println!("observed order: n/a (all residuals are zero)"),
            }
            verdict(report.pass)
        }
        Command::CheckReservoir {
            capacity,
            stream_len,
            trials,
            seed,
            json,
        } => {
            let opts = ReservoirCheckOptions {
                capacity,
                stream_len,
                trials,
                seed,
                ..ReservoirCheckOptions::default()
            };
            let report = check_reservoir(&opts).map_err(classify)?;
            if json {
                print_json(&report)?;
            }
            println!("item  frequency  (expected {:.4})", report.expected);
            for (i, f) in report.frequencies.iter().enumerate() {
                println!("{i:>4}  {f:.5}");
            }
            println!(
                "chi-square {:.4} on {} dof, p = {:.4}",
                report.chi_square, report.degrees_of_freedom, report.p_value
            );
            verdict(report.pass)
        }
    }
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
