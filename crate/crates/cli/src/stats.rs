//! `stats`: summarize a training run's dataset and metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use hybrid_grasp::policy::{artifact_paths, AttemptRecord};
use serde_json::json;

use crate::error::CliError;

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Bins of the lateral-angle histograms over [-0.5, 0.5] rad.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Echoed into the report; the summary itself draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> Option<f64> {
    let n = ys.len();
    if n < 2 {
        return None;
    }
    let mx = (n - 1) as f64 / 2.0;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    Some(sxy / sxx)
}

#[derive(Default)]
struct Tally {
    attempts: usize,
    successes: usize,
}

impl Tally {
    fn add(&mut self, r: &AttemptRecord) {
        self.attempts += 1;
        self.successes += r.reward as usize;
    }

    fn json(&self) -> serde_json::Value {
        let rate = if self.attempts == 0 { 0.0 } else { self.successes as f64 / self.attempts as f64 };
        json!({ "attempts": self.attempts, "successes": self.successes, "rate": rate })
    }
}

fn tallies<K: std::fmt::Display>(m: BTreeMap<K, Tally>) -> serde_json::Map<String, serde_json::Value> {
    m.into_iter().map(|(k, v)| (k.to_string(), v.json())).collect()
}

fn histogram(values: impl Iterator<Item = f64>, bins: usize, limit: f64) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let f = ((v + limit) / (2.0 * limit) * bins as f64).floor();
        h[(f.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

pub fn run(args: &StatsArgs) -> Result<(), CliError> {
    if args.bins == 0 {
        return Err(CliError::Validation("--bins must be positive".into()));
    }
    let [_, dataset_path, metrics_path, _] = artifact_paths(&args.run_dir);
    let text = fs::read_to_string(&dataset_path)
        .map_err(|e| CliError::Validation(format!("dataset {}: {e}", dataset_path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: AttemptRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("dataset line {}: {e}", i + 1)))?;
        records.push(r);
    }

    let mut total = Tally::default();
    let mut by_stage: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut by_prim: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut by_strategy: BTreeMap<String, Tally> = BTreeMap::new();
    let executed: Vec<&AttemptRecord> = records.iter().filter(|r| r.executed).collect();
    for r in &records {
        total.add(r);
        by_stage.entry(r.stage).or_default().add(r);
        by_strategy.entry(r.strategy.clone()).or_default().add(r);
        if r.executed {
            by_prim.entry(r.m).or_default().add(r);
        }
    }
    let max_abs = |f: fn(&AttemptRecord) -> f64| executed.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
    let mean_abs = |f: fn(&AttemptRecord) -> f64| {
        if executed.is_empty() {
            0.0
        } else {
            executed.iter().map(|r| f(r).abs()).sum::<f64>() / executed.len() as f64
        }
    };

    let mut val_bce = Vec::new();
    if let Ok(csv) = fs::read_to_string(&metrics_path) {
        for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
            let v = line.split(',').nth(4).and_then(|s| s.parse::<f64>().ok());
            val_bce.extend(v.filter(|v| v.is_finite()));
        }
    }
    let hashes: std::collections::BTreeSet<&str> = records.iter().map(|r| r.config_hash.as_str()).collect();
    let seeds: std::collections::BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let report = json!({
        "run_dir": args.run_dir,
        "config_hashes": hashes,
        "seeds": seeds,
        "seed": args.seed,
        "total": total.json(),
        "executed": executed.len(),
        "by_stage": tallies(by_stage),
        "by_primitive": tallies(by_prim),
        "by_strategy": tallies(by_strategy),
        "lateral": {
            "max_abs_b": max_abs(|r| r.b),
            "max_abs_c": max_abs(|r| r.c),
            "mean_abs_b": mean_abs(|r| r.b),
            "mean_abs_c": mean_abs(|r| r.c),
            "clipped_b": executed.iter().filter(|r| r.clipped_b).count(),
            "clipped_c": executed.iter().filter(|r| r.clipped_c).count(),
            "uncertain": executed.iter().filter(|r| r.uncertain).count(),
            "histogram_b": histogram(executed.iter().map(|r| r.b), args.bins, 0.5),
            "histogram_c": histogram(executed.iter().map(|r| r.c), args.bins, 0.5),
        },
        "validation_bce": {
            "checkpoints": val_bce.len(),
            "final": val_bce.last(),
            "slope": slope(&val_bce),
        },
    });
    crate::emit!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
