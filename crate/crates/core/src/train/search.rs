use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, run_parallel, train_epoch, ExperimentConfig, HyperConfig};
use crate::data::{Manifest, Sample};
use crate::error::Result;
use crate::eval::kfold_plan;
use crate::model::build_network;
use crate::nn::{AdamConfig, AdamState};

/// The five tuning rounds shipped as the default grid.
pub const DEFAULT_GRID_JSON: &str = include_str!("../../grids/default.json");

pub fn default_grid() -> Vec<HyperConfig> {
    serde_json::from_str(DEFAULT_GRID_JSON).expect("shipped grid parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// 1-based position after ranking.
    pub rank: usize,
    pub grid_index: usize,
    pub hyper: HyperConfig,
    /// Widest encoder filter count actually trained.
    pub filter_size: usize,
    pub train_loss: Option<f64>,
    pub val_bce: Option<f64>,
    pub error: Option<String>,
}

/// Ascending validation BCE; ties go to the lower learning rate, then the
/// smaller filter size, then grid order. Failed configs rank last.
pub fn rank_results(mut results: Vec<SearchResult>) -> Vec<SearchResult> {
    results.sort_by(|a, b| {
        let bce = match (a.val_bce, b.val_bce) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        bce.then(a.hyper.learning_rate.total_cmp(&b.hyper.learning_rate))
            .then(a.filter_size.cmp(&b.filter_size))
            .then(a.grid_index.cmp(&b.grid_index))
    });
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

/// Scores every grid entry with `evaluator`, which returns
/// `(train_loss, val_bce)`, and ranks the outcome.
pub fn hyper_search_with(
    grid: &[HyperConfig],
    base: &ExperimentConfig,
    jobs: usize,
    evaluator: impl Fn(usize, &HyperConfig) -> Result<(f64, f64)> + Sync,
) -> Vec<SearchResult> {
    let results = run_parallel(grid.len(), jobs, |i| {
        let hyper = &grid[i];
        let filter_size = hyper
            .network(&base.network)
            .effective_encoder_filters()
            .into_iter()
            .max()
            .unwrap_or(0);
        let outcome = evaluator(i, hyper);
        let (train_loss, val_bce, error) = match outcome {
            Ok((t, v)) if v.is_finite() => (Some(t), Some(v), None),
            Ok((t, v)) => (Some(t), None, Some(format!("non-finite validation BCE {v}"))),
            Err(e) => (None, None, Some(e.to_string())),
        };
        SearchResult {
            rank: 0,
            grid_index: i,
            hyper: hyper.clone(),
            filter_size,
            train_loss,
            val_bce,
            error,
        }
    });
    rank_results(results)
}

/// Trains each grid config for exactly one epoch and ranks them by the
/// validation BCE. Validation is fold 0 of a `k`-fold plan; the remaining
/// folds train.
pub fn hyper_search(
    manifest: &Manifest,
    samples: &[Sample],
    grid: &[HyperConfig],
    base: &ExperimentConfig,
    jobs: usize,
) -> Vec<SearchResult> {
    hyper_search_with(grid, base, jobs, |i, hyper| {
        let cfg = ExperimentConfig {
            hyper: HyperConfig {
                epochs_cap: 1,
                ..hyper.clone()
            },
            ..base.clone()
        };
        let run = || -> Result<(f64, f64)> {
            cfg.check()?;
            let plan = kfold_plan(manifest, hyper.k, hyper.seed, cfg.subject_wise)?;
            let val = plan.fold_records(0);
            let train = plan.records_outside(&[0]);
            let mut state = build_network(hyper.network(&cfg.network))?;
            let mut adam = AdamState::new(
                &state.params,
                AdamConfig {
                    learning_rate: hyper.learning_rate,
                    ..AdamConfig::default()
                },
            );
            let train_loss = train_epoch(
                &mut state,
                samples,
                &train,
                hyper.batch_size,
                hyper.seed,
                &mut adam,
                &cfg.loss,
                cfg.augmentation.as_ref(),
                0,
            )?;
            let eval = evaluate(&state, samples, &val, hyper.batch_size, &cfg.loss, cfg.threshold)?;
            Ok((train_loss, eval.metrics.report().bce))
        };
        run().map_err(|e| e.context(format!("grid entry {i}")))
    })
}

/// Ranked table, one row per grid entry.
pub fn tune_csv(results: &[SearchResult]) -> String {
    let mut s = String::from("rank,grid_index,learning_rate,filter_size,batch_size,k,train_loss,val_bce,status\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.rank,
            r.grid_index,
            r.hyper.learning_rate,
            r.filter_size,
            r.hyper.batch_size,
            r.hyper.k,
            opt(r.train_loss),
            opt(r.val_bce),
            status
        );
    }
    s
}
