//! Epoch loop, early stopping, cross-validated runs and grid search.

mod report;
mod runs;
mod search;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, collate, AugmentationSpec, Sample};
use crate::error::{Error, Result};
use crate::eval::{MetricsAccumulator, DEFAULT_THRESHOLD};
use crate::model::{NetworkConfig, NetworkState};
use crate::nn::{adam_step, derive_seed, AdamState, LossConfig};
use crate::tensor::Tensor;

pub use report::{EpochLosses, FoldReport, TrainRunReport, LOSS_CSV_HEADER};
pub use runs::{fit, fold_sets, run_cv, run_folds, train_split, FitHistory};
pub use search::{default_grid, hyper_search, hyper_search_with, rank_results, tune_csv, SearchResult, DEFAULT_GRID_JSON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub learning_rate: f32,
    /// Widest encoder filter count; the rest of the schedule halves. `None`
    /// keeps the network config's explicit lists.
    pub filter_size: Option<usize>,
    pub batch_size: usize,
    pub k: usize,
    pub epochs_cap: usize,
    pub seed: u64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            learning_rate: 4e-4,
            filter_size: None,
            batch_size: 16,
            k: 10,
            epochs_cap: 50,
            seed: 0,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("hyper.learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(f) = self.filter_size {
            if !(8..=512).contains(&f) || !f.is_power_of_two() {
                errs.push(format!("hyper.filter_size must be a power of two in [8, 512], got {f}"));
            }
        }
        if self.batch_size == 0 {
            errs.push("hyper.batch_size must be positive".to_string());
        }
        if self.k < 2 {
            errs.push(format!("hyper.k must be at least 2, got {}", self.k));
        }
        if self.epochs_cap == 0 {
            errs.push("hyper.epochs_cap must be positive".to_string());
        }
        errs
    }

    /// The network config with this run's filter schedule applied.
    pub fn network(&self, base: &NetworkConfig) -> NetworkConfig {
        match self.filter_size {
            Some(f) => base.clone().with_filter_size(f),
            None => base.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopPolicy {
    pub patience_epochs: usize,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        EarlyStopPolicy { patience_epochs: 1 }
    }
}

/// True iff each of the last `patience_epochs` validation-loss changes is a
/// strict increase.
pub fn check_early_stop(history: &[f64], policy: &EarlyStopPolicy) -> bool {
    let p = policy.patience_epochs.max(1);
    if history.len() <= p {
        return false;
    }
    history[history.len() - p - 1..].windows(2).all(|w| w[1] > w[0])
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub hyper: HyperConfig,
    pub loss: LossConfig,
    /// `None` trains on the raw samples.
    pub augmentation: Option<AugmentationSpec>,
    pub early_stop: EarlyStopPolicy,
    pub threshold: f32,
    pub subject_wise: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkConfig::default(),
            hyper: HyperConfig::default(),
            loss: LossConfig::default(),
            augmentation: Some(AugmentationSpec::default()),
            early_stop: EarlyStopPolicy::default(),
            threshold: DEFAULT_THRESHOLD,
            subject_wise: true,
        }
    }
}

impl ExperimentConfig {
    /// Every violated field across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.hyper.network(&self.network).validate();
        errs.extend(self.hyper.validate());
        errs.extend(self.loss.validate());
        if let Some(a) = &self.augmentation {
            errs.extend(a.validate());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            errs.push(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Draw index for the augmentation of `record` in `epoch`; unique per pair.
pub fn draw_index(epoch: usize, record: usize) -> u64 {
    ((epoch as u64) << 32) | record as u64
}

/// Order in which `records` are visited in `epoch`.
pub fn epoch_order(records: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = records.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}"))));
    order
}

fn batch_tensors(samples: &[Sample], idx: &[usize], aug: Option<&AugmentationSpec>, epoch: usize) -> Result<(Tensor, Tensor)> {
    match aug {
        None => collate(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()),
        Some(spec) => {
            let mut images = Vec::with_capacity(idx.len());
            let mut masks = Vec::with_capacity(idx.len());
            for &i in idx {
                let (x, y) = augment(&samples[i].image, &samples[i].mask, spec, draw_index(epoch, i))?;
                images.push(x);
                masks.push(y);
            }
            Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
        }
    }
}

/// One pass over `records` in mini-batches of `batch_size`, one Adam step per
/// batch. Returns the sample-weighted mean training loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    state: &mut NetworkState,
    samples: &[Sample],
    records: &[usize],
    batch_size: usize,
    seed: u64,
    adam: &mut AdamState,
    loss: &LossConfig,
    aug: Option<&AugmentationSpec>,
    epoch: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("train_epoch: no training records".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("train_epoch: batch_size must be positive".into()));
    }
    let order = epoch_order(records, seed, epoch);
    let mut weighted = 0.0f64;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let mut step = || -> Result<f32> {
            let (x, y) = batch_tensors(samples, chunk, aug, epoch)?;
            let l = state.accumulate_gradients(&x, &y, loss)?;
            adam_step(&mut state.params, adam)?;
            Ok(l)
        };
        let l = step().map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;
        weighted += l as f64 * chunk.len() as f64;
    }
    Ok(weighted / records.len() as f64)
}

/// Loss and pixel metrics of the un-augmented `records`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Sample-weighted mean total loss.
    pub loss: f64,
    pub metrics: MetricsAccumulator,
}

pub fn evaluate(
    state: &NetworkState,
    samples: &[Sample],
    records: &[usize],
    batch_size: usize,
    loss: &LossConfig,
    threshold: f32,
) -> Result<Evaluation> {
    let mut metrics = MetricsAccumulator::default();
    let mut weighted = 0.0f64;
    for chunk in records.chunks(batch_size.max(1)) {
        let (x, y) = collate(&chunk.iter().map(|&i| &samples[i]).collect::<Vec<_>>())?;
        let (l, pred) = state.evaluate_loss(&x, &y, loss)?;
        weighted += l as f64 * chunk.len() as f64;
        metrics.add(&pred.seg_prob, &y, threshold)?;
    }
    Ok(Evaluation {
        loss: if records.is_empty() { 0.0 } else { weighted / records.len() as f64 },
        metrics,
    })
}

/// Runs `job(i)` for `i in 0..n` on up to `jobs` threads; results keep index
/// order regardless of scheduling.
pub fn run_parallel<T: Send>(n: usize, jobs: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no job panicked while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("all workers joined")
        .into_iter()
        .map(|o| o.expect("every index was processed"))
        .collect()
}
