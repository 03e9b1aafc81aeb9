use std::time::Instant;

use super::report::{EpochLosses, FoldReport, TrainRunReport};
use super::{check_early_stop, evaluate, run_parallel, train_epoch, ExperimentConfig};
use crate::data::{Manifest, Sample};
use crate::error::{Error, Result};
use crate::eval::{kfold_plan, split_622, FoldPlan};
use crate::model::{build_network, NetworkState};
use crate::nn::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct FitHistory {
    pub epochs: Vec<EpochLosses>,
    pub stopped_early: bool,
}

/// Trains until the validation loss rises for `patience_epochs` consecutive
/// epochs or `epochs_cap` is reached. The network keeps its final weights.
pub fn fit(
    state: &mut NetworkState,
    samples: &[Sample],
    train: &[usize],
    val: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FitHistory> {
    let h = &cfg.hyper;
    let mut adam = AdamState::new(
        &state.params,
        AdamConfig {
            learning_rate: h.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut epochs = Vec::new();
    let mut val_history = Vec::new();
    for epoch in 0..h.epochs_cap {
        let train_loss = train_epoch(state, samples, train, h.batch_size, seed, &mut adam, &cfg.loss, cfg.augmentation.as_ref(), epoch)?;
        let val_loss = evaluate(state, samples, val, h.batch_size, &cfg.loss, cfg.threshold)?.loss;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Config(format!("loss diverged at epoch {epoch}")));
        }
        epochs.push(EpochLosses {
            epoch,
            train_loss,
            val_loss,
        });
        val_history.push(val_loss);
        if check_early_stop(&val_history, &cfg.early_stop) {
            return Ok(FitHistory {
                epochs,
                stopped_early: true,
            });
        }
    }
    Ok(FitHistory {
        epochs,
        stopped_early: false,
    })
}

fn run_fold(
    samples: &[Sample],
    cfg: &ExperimentConfig,
    fold: usize,
    train: &[usize],
    val: &[usize],
    test: &[usize],
) -> Result<(FoldReport, NetworkState)> {
    let mut network = cfg.hyper.network(&cfg.network);
    network.seed = network.seed.wrapping_add(fold as u64);
    let mut state = build_network(network)?;
    let seed = cfg.hyper.seed.wrapping_add(fold as u64);
    let history = fit(&mut state, samples, train, val, cfg, seed)?;
    let eval = evaluate(&state, samples, test, cfg.hyper.batch_size, &cfg.loss, cfg.threshold)?;
    let report = FoldReport {
        fold,
        train_records: train.len(),
        val_records: val.len(),
        test_records: test.len(),
        epochs: history.epochs,
        stopped_early: history.stopped_early,
        test_loss: eval.loss,
        confusion: eval.metrics.confusion,
        metrics: eval.metrics.report(),
        bce_sum: eval.metrics.bce_sum,
        pixels: eval.metrics.pixels,
    };
    Ok((report, state))
}

fn check_samples(manifest: &Manifest, samples: &[Sample], cfg: &ExperimentConfig) -> Result<()> {
    cfg.check()?;
    if manifest.len() != samples.len() {
        return Err(Error::Config(format!(
            "{} manifest records but {} loaded samples",
            manifest.len(),
            samples.len()
        )));
    }
    Ok(())
}

/// Train/validation/test record lists of fold `f`. Validation is the next
/// fold round; with only two folds the training records double as
/// validation.
pub fn fold_sets(plan: &FoldPlan, f: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let test = plan.fold_records(f);
    if plan.k >= 3 {
        let v = (f + 1) % plan.k;
        (plan.records_outside(&[f, v]), plan.fold_records(v), test)
    } else {
        let train = plan.records_outside(&[f]);
        (train.clone(), train, test)
    }
}

/// Trains and evaluates every fold of `plan`, up to `jobs` folds at once.
pub fn run_folds(samples: &[Sample], cfg: &ExperimentConfig, plan: &FoldPlan, jobs: usize) -> Result<Vec<FoldReport>> {
    run_parallel(plan.k, jobs, |f| {
        let (train, val, test) = fold_sets(plan, f);
        run_fold(samples, cfg, f, &train, &val, &test)
            .map(|(r, _)| r)
            .map_err(|e| e.context(format!("fold {f}")))
    })
    .into_iter()
    .collect()
}

/// k-fold cross-validation with a fresh network per fold.
pub fn run_cv(manifest: &Manifest, samples: &[Sample], cfg: &ExperimentConfig, jobs: usize) -> Result<TrainRunReport> {
    let start = Instant::now();
    check_samples(manifest, samples, cfg)?;
    let plan = kfold_plan(manifest, cfg.hyper.k, cfg.hyper.seed, cfg.subject_wise)?;
    let folds = run_folds(samples, cfg, &plan, jobs)?;
    let mut report = TrainRunReport::new("cv", cfg.clone(), folds);
    report.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    Ok(report)
}

/// Trains one network on the 6/2/2 subject split and evaluates it on the
/// test portion.
pub fn train_split(manifest: &Manifest, samples: &[Sample], cfg: &ExperimentConfig) -> Result<(TrainRunReport, NetworkState)> {
    let start = Instant::now();
    check_samples(manifest, samples, cfg)?;
    let split = split_622(manifest, cfg.hyper.seed)?;
    let (fold, state) = run_fold(samples, cfg, 0, &split.train, &split.val, &split.test)?;
    let mut report = TrainRunReport::new("split", cfg.clone(), vec![fold]);
    report.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    Ok((report, state))
}
