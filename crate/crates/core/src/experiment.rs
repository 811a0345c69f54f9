//! Multi-seed experiments: one split and one initialization per seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config, Error, Result};
use crate::graph::{random_split, DEFAULT_SPLIT};
use crate::layers::{Model, ModelConfig};
use crate::training::{train, RunResult, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(flatten)]
    pub result: RunResult,
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub test_acc: Summary,
    pub val_acc: Summary,
}

impl ExperimentResult {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let test: Vec<f64> = runs.iter().map(|r| r.result.test_acc_at_best_val).collect();
        let val: Vec<f64> = runs.iter().map(|r| r.result.best_val_acc).collect();
        Self {
            test_acc: Summary::of(&test),
            val_acc: Summary::of(&val),
            runs,
        }
    }
}

/// Trains one model for `seed`: the seed drives the split, the
/// initialization and the dropout masks.
pub fn run_seed(model: &ModelConfig, training: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<(Model, RunResult)> {
    let masks = random_split(dataset.num_nodes(), DEFAULT_SPLIT, seed)?;
    let model = ModelConfig { seed, ..model.clone() };
    let training = TrainConfig { seed, ..training.clone() };
    train(&model, &training, dataset, &masks)
}

/// Runs every seed, `parallel` at a time, and aggregates the results in seed
/// order. `on_done` is called as each seed finishes.
pub fn run_experiment<F>(
    model: &ModelConfig,
    training: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    parallel: usize,
    on_done: F,
) -> Result<(ExperimentResult, Vec<Model>)>
where
    F: Fn(u64, &RunResult) + Sync,
{
    if seeds.is_empty() {
        return Err(config("no seeds requested"));
    }
    model.validate()?;
    training.validate()?;
    let run = |&seed: &u64| {
        let out = run_seed(model, training, dataset, seed);
        if let Ok((_, r)) = &out {
            on_done(seed, r);
        }
        out.map(|(m, r)| (m, SeedRun { seed, result: r }))
    };
    let outcomes: Vec<Result<(Model, SeedRun)>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| config(format!("cannot start {parallel} workers: {e}")))?;
        pool.install(|| seeds.par_iter().map(run).collect())
    } else {
        seeds.iter().map(run).collect()
    };
    let mut models = Vec::with_capacity(seeds.len());
    let mut runs = Vec::with_capacity(seeds.len());
    for outcome in outcomes {
        let (m, r) = outcome?;
        models.push(m);
        runs.push(r);
    }
    Ok((ExperimentResult::from_runs(runs), models))
}

/// Parses `a..b` (inclusive) or a single seed.
pub fn parse_seed_range(range: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed range `{range}`, expected `a..b` or a single seed"));
    match range.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![range.trim().parse().map_err(|_| bad())?]),
    }
}
