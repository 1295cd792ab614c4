//! Architecture benchmark and target-correlation sweep, both as seed
//! ensembles evaluated on the test split.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_ensemble, EnsembleEvaluation};
use crate::model::{BaselineKind, ModelSpec};
use crate::parallel;
use crate::trainer::{train_one, RunOptions, TrainConfig, TrainedModel};

/// Published figures for the original heritage dataset. They are shown next
/// to synthetic results for orientation and never compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn benchmark_reference(model: &str) -> Option<Reference> {
    let r = |accuracy, f1, precision, recall| Some(Reference { accuracy, f1, precision, recall });
    match model {
        "ours" => r(0.769, 0.770, 0.868, 0.769),
        "perceiverio_classic" => r(0.615, 0.624, 0.700, 0.615),
        "perceiver" => r(0.615, 0.604, 0.670, 0.615),
        "transformer_concat" => r(0.538, 0.516, 0.654, 0.538),
        "sensor_only" => r(0.615, 0.591, 0.615, 0.615),
        "image_only" => r(0.462, 0.405, 0.462, 0.462),
        _ => None,
    }
}

pub fn sweep_reference(tau: f64) -> Option<f64> {
    let close = |v: f64| (tau - v).abs() < 1e-9;
    if close(0.3) {
        Some(0.692)
    } else if close(0.9) {
        Some(0.615)
    } else if close(0.1) || close(0.5) || close(0.7) {
        Some(0.538)
    } else {
        None
    }
}

pub const DEFAULT_TAUS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Trains every `(spec, config)` job for `n_seeds` seeds, fanning the
/// individual runs out over the worker pool. Output is grouped by job and
/// ordered by seed.
pub fn train_grid(
    jobs: &[(ModelSpec, TrainConfig)],
    data: &SplitDataset,
    n_seeds: usize,
    opts: RunOptions,
) -> Result<Vec<Vec<TrainedModel>>> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let runs: Vec<(usize, u64)> = (0..jobs.len())
        .flat_map(|j| (0..n_seeds as u64).map(move |k| (j, jobs[j].1.seed.wrapping_add(k))))
        .collect();
    let results = parallel::map_jobs(&runs, opts.jobs, |&(j, seed)| {
        let (spec, cfg) = &jobs[j];
        let cfg = TrainConfig { seed, ..cfg.clone() };
        train_one(spec, &cfg, data, opts.progress).map_err(|e| Error::SeedRun { seed, source: Box::new(e) })
    })?;
    let mut grouped: Vec<Vec<TrainedModel>> = (0..jobs.len()).map(|_| Vec::with_capacity(n_seeds)).collect();
    for ((j, _), r) in runs.iter().zip(results) {
        grouped[*j].push(r?);
    }
    Ok(grouped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    /// 1-based position in the ranking.
    pub rank: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub evaluation: EnsembleEvaluation,
    pub reference: Option<Reference>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_seeds: usize,
    pub base_seed: u64,
    pub n_test: usize,
    /// Rows in ranking order.
    pub rows: Vec<BenchmarkRow>,
    pub reference_note: String,
}

/// Ranking key: ensemble accuracy, then ensemble F1, then mean member
/// accuracy, all descending; name ascending breaks exact ties.
fn rank_order(a: &BenchmarkRow, b: &BenchmarkRow) -> Ordering {
    let desc = |x: f64, y: f64| y.partial_cmp(&x).unwrap_or(Ordering::Equal);
    desc(a.accuracy, b.accuracy)
        .then(desc(a.f1, b.f1))
        .then(desc(a.evaluation.seed_mean_accuracy, b.evaluation.seed_mean_accuracy))
        .then(a.model.cmp(&b.model))
}

pub const REFERENCE_NOTE: &str = "reference values come from the original 13-sample heritage test set and are \
     annotations only; synthetic results are not expected to match them";

/// Trains `ours` (with `fusion`) plus every kind in `kinds` as `n_seeds`
/// ensembles and ranks them on the test split.
pub fn run_benchmark(
    data: &SplitDataset,
    fusion: &ModelSpec,
    kinds: &[BaselineKind],
    cfg: &TrainConfig,
    n_seeds: usize,
    opts: RunOptions,
) -> Result<BenchmarkReport> {
    if !matches!(fusion, ModelSpec::Fusion(_)) {
        return Err(Error::Config("the benchmark's main model must use the fusion architecture".into()));
    }
    let mut jobs = vec![(fusion.clone(), cfg.clone())];
    for &k in kinds {
        if jobs.iter().any(|(s, _)| s.name() == k.name()) {
            return Err(Error::Config(format!("baseline kind `{k}` requested twice")));
        }
        jobs.push((ModelSpec::baseline(k), cfg.clone()));
    }
    let trained = train_grid(&jobs, data, n_seeds, opts)?;
    let mut rows = jobs
        .iter()
        .zip(&trained)
        .map(|((spec, _), runs)| {
            let evaluation = evaluate_ensemble(runs, &data.test)?;
            let m = &evaluation.metrics;
            Ok(BenchmarkRow {
                model: spec.name().to_string(),
                rank: 0,
                accuracy: m.accuracy,
                f1: m.weighted_f1,
                precision: m.weighted_precision,
                recall: m.weighted_recall,
                reference: benchmark_reference(spec.name()),
                evaluation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(rank_order);
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(BenchmarkReport {
        n_seeds,
        base_seed: cfg.seed,
        n_test: data.test.len(),
        rows,
        reference_note: REFERENCE_NOTE.to_string(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl BenchmarkReport {
    /// One line per model in ranking order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,model,accuracy,f1,precision,recall,seed_mean_accuracy,seed_std_accuracy,\
             reference_accuracy,reference_f1,reference_precision,reference_recall\n",
        );
        for r in &self.rows {
            let e = &r.evaluation;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.rank,
                r.model,
                r.accuracy,
                r.f1,
                r.precision,
                r.recall,
                e.seed_mean_accuracy,
                e.seed_std_accuracy,
                opt(r.reference.map(|x| x.accuracy)),
                opt(r.reference.map(|x| x.f1)),
                opt(r.reference.map(|x| x.precision)),
                opt(r.reference.map(|x| x.recall)),
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub evaluation: EnsembleEvaluation,
    pub reference_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub n_seeds: usize,
    pub base_seed: u64,
    /// Training runs performed, `taus × seeds`.
    pub runs: usize,
    pub points: Vec<SweepPoint>,
    pub reference_note: String,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,accuracy,seed_mean_accuracy,seed_std_accuracy,reference_accuracy\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.tau,
                p.accuracy,
                p.evaluation.seed_mean_accuracy,
                p.evaluation.seed_std_accuracy,
                opt(p.reference_accuracy)
            ));
        }
        out
    }
}

/// Trains the fusion model once per `tau` as an `n_seeds` ensemble.
pub fn run_tau_sweep(
    data: &SplitDataset,
    fusion: &ModelSpec,
    cfg: &TrainConfig,
    taus: &[f64],
    n_seeds: usize,
    opts: RunOptions,
) -> Result<SweepReport> {
    if taus.is_empty() {
        return Err(Error::Config("tau list is empty".into()));
    }
    if !matches!(fusion, ModelSpec::Fusion(_)) {
        return Err(Error::Config("the sweep varies the fusion model's loss; got a baseline spec".into()));
    }
    let jobs = taus
        .iter()
        .map(|&tau| {
            let mut c = cfg.clone();
            c.bt.tau = tau;
            c.bt.validate()?;
            Ok((fusion.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let trained = train_grid(&jobs, data, n_seeds, opts)?;
    let points = taus
        .iter()
        .zip(&trained)
        .map(|(&tau, runs)| {
            let evaluation = evaluate_ensemble(runs, &data.test)?;
            Ok(SweepPoint {
                tau,
                accuracy: evaluation.metrics.accuracy,
                evaluation,
                reference_accuracy: sweep_reference(tau),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        n_seeds,
        base_seed: cfg.seed,
        runs: taus.len() * n_seeds,
        points,
        reference_note: REFERENCE_NOTE.to_string(),
    })
}
