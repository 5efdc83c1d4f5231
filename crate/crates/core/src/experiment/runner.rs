//! Multi-seed orchestration and report files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DatasetSpec, ExperimentConfig};
use super::stats::{mean_std, sign_test, SignTest};
use crate::checkpoint;
use crate::datasets::{load_split_image_dataset, make_synthetic_tasks, TaskSequence};
use crate::error::Result;
use crate::metrics::{AccuracyMatrix, MetricsReport};
use crate::rng::Stream;
use crate::trainer::{Counters, DiagnosticRow, Learner, DIAGNOSTICS_HEADER};

pub const BUILD_ID: &str = match option_env!("DDN_BUILD_ID") {
    Some(id) => id,
    None => "unknown",
};

/// Everything one (strategy, seed) run produced.
pub struct SeedOutcome {
    pub seed: u64,
    pub strategy: String,
    pub report: MetricsReport,
    pub counters: Counters,
    pub diagnostics: Vec<DiagnosticRow>,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub acc: f64,
    pub fm: f64,
    pub per_task_final: Vec<f64>,
    pub matrix: AccuracyMatrix,
    pub confusion: Vec<Vec<u64>>,
    pub class_prob_profiles: Vec<Option<Vec<f64>>>,
    pub counters: Counters,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub fm_mean: f64,
    pub fm_std: f64,
    pub seeds: Vec<SeedSummary>,
}

/// Paired comparison of a soft-label strategy with its one-hot baseline.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    /// Candidate ACC above baseline ACC, per seed.
    pub acc_sign_test: SignTest,
    /// Candidate FM below baseline FM, per seed.
    pub fm_sign_test: SignTest,
    pub acc_mean_diff: f64,
    pub fm_mean_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: String,
    pub build_id: String,
    pub wall_clock_seconds: f64,
    pub strategies: Vec<StrategySummary>,
    pub comparison: Option<Comparison>,
}

impl RunReport {
    pub fn strategy(&self, label: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == label)
    }
}

/// The task sequence a seed trains on. Synthetic data is regenerated from
/// the seed's data stream; file datasets are the same for every seed.
pub fn task_sequence(cfg: &ExperimentConfig, seed: u64) -> Result<TaskSequence> {
    let mut seq = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => make_synthetic_tasks(s, &mut cfg.seed_tree(seed).rng(Stream::Data))?,
        DatasetSpec::Files { train, test } => load_split_image_dataset(train, test, cfg.num_tasks)?,
    };
    seq.set_protocol(cfg.protocol, cfg.epochs)?;
    Ok(seq)
}

pub fn run_seed(cfg: &ExperimentConfig, seq: &TaskSequence, seed: u64) -> Result<SeedOutcome> {
    let mut learner = Learner::new(cfg.trainer.clone(), seq, &cfg.seed_tree(seed))?;
    let report = learner.run(seq)?;
    let checkpoint = checkpoint::to_string(
        &[
            ("theta", &learner.classifier.theta),
            ("omega", &learner.ddn.omega),
            ("omega_old", &learner.ddn.omega_old),
        ],
        Some(&learner.buffer),
    )?;
    Ok(SeedOutcome {
        seed,
        strategy: cfg.trainer.strategy.label(),
        report,
        counters: learner.counters,
        diagnostics: std::mem::take(&mut learner.diagnostics),
        checkpoint,
    })
}

fn summarize(label: String, outcomes: &[&SeedOutcome]) -> StrategySummary {
    let accs: Vec<f64> = outcomes.iter().map(|o| o.report.acc).collect();
    let fms: Vec<f64> = outcomes.iter().map(|o| o.report.fm).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let (fm_mean, fm_std) = mean_std(&fms);
    StrategySummary {
        strategy: label,
        acc_mean,
        acc_std,
        fm_mean,
        fm_std,
        seeds: outcomes
            .iter()
            .map(|o| SeedSummary {
                seed: o.seed,
                acc: o.report.acc,
                fm: o.report.fm,
                per_task_final: o.report.per_task_final.clone(),
                matrix: o.report.matrix.clone(),
                confusion: o.report.confusion.clone(),
                class_prob_profiles: o.report.class_prob_profiles.clone(),
                counters: o.counters,
            })
            .collect(),
    }
}

/// Runs every seed (and the baseline when requested) without touching disk.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut variants = Vec::new();
    if cfg.compare_baseline {
        variants.push(cfg.baseline());
    }
    variants.push(cfg.clone());

    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let outcomes: Vec<SeedOutcome> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let seq = task_sequence(&variants[v], seed)?;
            run_seed(&variants[v], &seq, seed)
        })
        .collect::<Result<_>>()?;

    let mut strategies = Vec::new();
    for v in &variants {
        let label = v.trainer.strategy.label();
        let mine: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.strategy == label).collect();
        strategies.push(summarize(label, &mine));
    }
    let comparison = (strategies.len() == 2).then(|| {
        let (b, c) = (&strategies[0], &strategies[1]);
        let acc_b: Vec<f64> = b.seeds.iter().map(|s| s.acc).collect();
        let acc_c: Vec<f64> = c.seeds.iter().map(|s| s.acc).collect();
        let fm_b: Vec<f64> = b.seeds.iter().map(|s| -s.fm).collect();
        let fm_c: Vec<f64> = c.seeds.iter().map(|s| -s.fm).collect();
        Comparison {
            baseline: b.strategy.clone(),
            candidate: c.strategy.clone(),
            acc_sign_test: sign_test(&acc_c, &acc_b),
            fm_sign_test: sign_test(&fm_c, &fm_b),
            acc_mean_diff: c.acc_mean - b.acc_mean,
            fm_mean_diff: c.fm_mean - b.fm_mean,
        }
    });
    let report = RunReport {
        config: cfg.to_kv(),
        build_id: BUILD_ID.to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        strategies,
        comparison,
    };
    Ok((report, outcomes))
}

/// `seed,strategy,task_k,a_1,…,a_T`, one row per evaluation point.
pub fn metrics_csv(outcomes: &[SeedOutcome]) -> String {
    let t = outcomes.first().map_or(0, |o| o.report.matrix.num_tasks());
    let mut out = String::from("seed,strategy,task_k");
    for i in 1..=t {
        let _ = write!(out, ",a_{i}");
    }
    out.push('\n');
    for o in outcomes {
        for k in 0..t {
            let _ = write!(out, "{},{},{}", o.seed, o.strategy, k + 1);
            for a in o.report.matrix.column(k) {
                match a {
                    Some(v) => {
                        let _ = write!(out, ",{v:.2}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn diagnostics_csv(outcomes: &[SeedOutcome]) -> String {
    let mut out = format!("seed,strategy,{DIAGNOSTICS_HEADER}\n");
    for o in outcomes {
        for row in &o.diagnostics {
            let _ = writeln!(out, "{},{},{}", o.seed, o.strategy, row.to_csv());
        }
    }
    out
}

pub fn write_outputs(dir: &Path, report: &RunReport, outcomes: &[SeedOutcome]) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(outcomes))?;
    std::fs::write(dir.join("diagnostics.csv"), diagnostics_csv(outcomes))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)? + "\n")?;
    for o in outcomes {
        std::fs::write(
            dir.join("checkpoints").join(format!("seed{}_{}.ckpt", o.seed, o.strategy)),
            &o.checkpoint,
        )?;
    }
    Ok(())
}

/// Runs the experiment and writes its files under `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (report, outcomes) = run_in_memory(cfg)?;
    write_outputs(&cfg.output_dir, &report, &outcomes)?;
    Ok(report)
}
