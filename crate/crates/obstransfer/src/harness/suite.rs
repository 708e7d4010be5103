use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{ExperimentConfig, RunKind};
use super::metrics::MetricsRow;
use super::HarnessError;
use crate::transfer::{self, run_source, RunOutput, RunSpec};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: &str = "kind,key,mean,std";

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub runs: Vec<SeedRun>,
    pub aggregate_csv: String,
}

/// Suite-level parallelism cap from `OBSTRANSFER_THREADS` (default 1).
pub fn suite_threads() -> usize {
    std::env::var("OBSTRANSFER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

fn execute(kind: RunKind, spec: &RunSpec) -> Result<RunOutput, transfer::TransferError> {
    match kind {
        RunKind::Source => run_source(spec),
        _ => transfer::run(spec),
    }
}

/// Runs one training run per seed (up to [`suite_threads`] at a time),
/// writes per-seed artifacts (when an output directory is configured),
/// and aggregates the evaluation curves: per eval point, the mean and
/// standard deviation of the evaluation return across seeds; plus one
/// area-under-curve row per seed.
pub fn run_suite(config: &ExperimentConfig) -> Result<SuiteOutcome, HarnessError> {
    let seeds = &config.seeds;
    let results: Vec<Mutex<Option<Result<SeedRun, transfer::TransferError>>>> =
        seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = suite_threads().min(seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let spec = config.run_spec(seed);
                let outcome = execute(config.kind, &spec).map(|out| SeedRun {
                    seed,
                    auc: out.auc,
                    metrics: out.metrics,
                });
                *results[i].lock().expect("no such panic") = Some(outcome);
            });
        }
    });

    let mut runs = Vec::with_capacity(seeds.len());
    let mut failures = Vec::new();
    for (seed, cell) in seeds.iter().zip(results) {
        match cell.into_inner().expect("worker finished") {
            Some(Ok(run)) => runs.push(run),
            Some(Err(e)) => failures.push(format!("seed {seed}: failed: {e}")),
            None => failures.push(format!("seed {seed}: did not run")),
        }
    }
    if !failures.is_empty() {
        let mut report: Vec<String> =
            runs.iter().map(|r| format!("seed {}: ok", r.seed)).collect();
        report.extend(failures);
        report.sort();
        return Err(HarnessError::Suite(report.join("; ")));
    }

    let aggregate_csv = aggregate(&runs)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(AGGREGATE_FILE), &aggregate_csv)?;
    }
    Ok(SuiteOutcome { runs, aggregate_csv })
}

fn aggregate(runs: &[SeedRun]) -> Result<String, HarnessError> {
    let first = &runs[0];
    for run in runs {
        let same_steps = run.metrics.len() == first.metrics.len()
            && run
                .metrics
                .iter()
                .zip(&first.metrics)
                .all(|(a, b)| a.step == b.step);
        if !same_steps {
            return Err(HarnessError::Suite(format!(
                "seed {} produced a different evaluation grid",
                run.seed
            )));
        }
    }
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for i in 0..first.metrics.len() {
        let step = first.metrics[i].step;
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.metrics[i].eval_return_mean)
            .collect();
        if values.len() != runs.len() {
            return Err(HarnessError::Suite(format!(
                "missing evaluation return at step {step}"
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.push_str(&format!("eval_return_mean,{step},{mean},{std}\n"));
    }
    for run in runs {
        out.push_str(&format!("auc,{},{},\n", run.seed, run.auc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config_text;

    fn tiny_config(seeds: &str) -> ExperimentConfig {
        parse_config_text(&format!(
            "env.name = gridmaze\nrun.baseline = single\nrun.seeds = {seeds}\n\
             run.total_steps = 120\nrun.eval_every = 60\nrun.eval_episodes = 2\n\
             agent.batch_size = 8\nagent.encoding_dim = 8\n"
        ))
        .unwrap()
    }

    #[test]
    fn single_seed_aggregate_equals_the_run() {
        let outcome = run_suite(&tiny_config("3")).unwrap();
        assert_eq!(outcome.runs.len(), 1);
        let run = &outcome.runs[0];
        for (row, line) in run.metrics.iter().zip(outcome.aggregate_csv.lines().skip(1)) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], "eval_return_mean");
            assert_eq!(cols[1], row.step.to_string());
            assert_eq!(cols[2].parse::<f64>().unwrap(), row.eval_return_mean.unwrap());
            assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
        }
        assert!(outcome
            .aggregate_csv
            .lines()
            .any(|l| l == format!("auc,3,{},", run.auc)));
    }

    #[test]
    fn aggregate_mean_matches_hand_computation() {
        let outcome = run_suite(&tiny_config("1,2")).unwrap();
        let by_seed: Vec<&SeedRun> = outcome.runs.iter().collect();
        let line = outcome
            .aggregate_csv
            .lines()
            .find(|l| l.starts_with("eval_return_mean,120,"))
            .unwrap();
        let mean: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        let expected = (by_seed[0].metrics[1].eval_return_mean.unwrap()
            + by_seed[1].metrics[1].eval_return_mean.unwrap())
            / 2.0;
        assert!((mean - expected).abs() < 1e-12);
    }

    #[test]
    fn reruns_are_byte_identical_and_seed_independent() {
        let a = run_suite(&tiny_config("1,2")).unwrap();
        let b = run_suite(&tiny_config("1,2")).unwrap();
        assert_eq!(a.aggregate_csv, b.aggregate_csv);
        // Adding a seed never changes another seed's results.
        let c = run_suite(&tiny_config("1,2,9")).unwrap();
        assert_eq!(a.runs[0].metrics, c.runs[0].metrics);
        assert_eq!(a.runs[1].metrics, c.runs[1].metrics);
    }
}
