//! Shared training-loop machinery: configuration, epoch bookkeeping,
//! seeded shuffling, and early stopping on a validation metric.

use thiserror::Error;

use super::NnError;
use crate::seeding::{self, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training inputs/targets have mismatched lengths: {inputs} vs {targets}")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("dataset contains a single treatment class; overlap is vacuously violated")]
    SingleClass,
    #[error("non-finite parameters after epoch {epoch}: {source}")]
    NonFinite { epoch: usize, source: NnError },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture and optimization settings shared by the outcome and
/// propensity fits.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Hidden widths of a feature-extractor trunk applied to the raw
    /// covariates before the treatment indicator is appended. Empty means
    /// the treatment is concatenated directly onto the covariates.
    pub extractor_hidden: Vec<usize>,
    /// Hidden widths of the network that consumes `[features, t]`.
    pub head_hidden: Vec<usize>,
    /// Mixture components for the outcome head (ignored by propensity).
    pub components: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults mirroring the low-dimensional benchmark setup: three
    /// 200-unit ELU hidden layers, 5 mixture components, dropout 0.1,
    /// batch 32, patience 20, at most 2000 epochs.
    pub fn low_dimensional(seed: u64) -> Self {
        TrainConfig {
            extractor_hidden: vec![],
            head_hidden: vec![200, 200, 200],
            components: 5,
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 2000,
            patience: 20,
            seed,
        }
    }

    /// High-dimensional setup: a three-layer 200-unit feature extractor,
    /// then a two-hidden-layer head over `[features, t]`.
    pub fn high_dimensional(seed: u64) -> Self {
        TrainConfig {
            extractor_hidden: vec![200, 200, 200],
            head_hidden: vec![200, 200],
            ..Self::low_dimensional(seed)
        }
    }
}

/// Per-epoch loss curves captured during a fit.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Patience-based early stopping; smaller metric is better.
#[derive(Debug)]
pub struct EarlyStop {
    best: f64,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
}

pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { best: f64::INFINITY, best_epoch: 0, since_best: 0, patience }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

/// Seed-reproducible index shuffle for one epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(seeding::derive(seed, Stream::Shuffle, epoch as u64));
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    order
}
