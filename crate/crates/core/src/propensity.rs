//! Nominal propensity model `e_t(x)` with Bernoulli likelihood.
//!
//! A dense trunk emits one logit; the treated probability is the sigmoid
//! of the logit, clipped to `[eps, 1 - eps]` at evaluation time so the
//! downstream odds bounds stay finite. Training uses the unclipped
//! logits (binary cross-entropy with logits).

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdn::gather_rows;
use crate::nn::train::{
    shuffled_indices, EarlyStop, StopDecision, TrainConfig, TrainError, TrainingHistory,
};
use crate::nn::{AdamState, DenseNetwork, DropoutMask, TraceDropout};
use crate::seeding::{self, Stream};

/// Evaluation-time clip on predicted propensities. Keeps the odds bounds
/// finite for every input, mirroring the uniform-overlap assumption.
pub const PROPENSITY_CLIP: f64 = 0.01;

/// Treatment model: `P(T = 1 | x)` through a sigmoid head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    net: DenseNetwork,
    clip: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl PropensityModel {
    pub fn from_network(net: DenseNetwork) -> Self {
        PropensityModel { net, clip: PROPENSITY_CLIP }
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn sample_mask(&self, rng: &mut impl Rng) -> DropoutMask {
        self.net.sample_mask(rng)
    }

    /// Clipped `P(T = 1 | x)` for each row of `xs`.
    pub fn treated_probability_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f64>, crate::nn::NnError> {
        let logits = self.net.forward_batch(xs, mask)?;
        Ok(logits
            .column(0)
            .iter()
            .map(|&z| sigmoid(z).clamp(self.clip, 1.0 - self.clip))
            .collect())
    }

    /// Probability of receiving arm `t` at `x`. The two arms sum to 1
    /// exactly: the untreated arm is the complement of the treated one.
    pub fn propensity_for_arm(
        &self,
        x: ArrayView1<'_, f64>,
        t: u8,
        mask: Option<&DropoutMask>,
    ) -> Result<f64, crate::nn::NnError> {
        let xs = x.insert_axis(Axis(0));
        let e1 = self.treated_probability_batch(xs, mask)?[0];
        Ok(if t == 1 { e1 } else { 1.0 - e1 })
    }
}

/// A fitted propensity model together with its training curves.
#[derive(Debug)]
pub struct PropensityFit {
    pub model: PropensityModel,
    pub history: TrainingHistory,
}

/// Train the treatment model by Bernoulli negative log likelihood with
/// the same optimizer and stopping defaults as the outcome fit.
pub fn fit_propensity(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    valid: Option<(ArrayView2<'_, f64>, &[u8])>,
    cfg: &TrainConfig,
) -> Result<PropensityFit, TrainError> {
    let n = x.nrows();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if t.len() != n {
        return Err(TrainError::LengthMismatch { inputs: n, targets: t.len() });
    }
    let treated = t.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == n {
        return Err(TrainError::SingleClass);
    }

    let hidden: Vec<usize> =
        cfg.extractor_hidden.iter().chain(cfg.head_hidden.iter()).copied().collect();
    let mut net = DenseNetwork::init(x.ncols(), &hidden, 1, cfg.dropout_rate, cfg.seed ^ 0x70)?;
    let mut adam = AdamState::with_learning_rate(&net, cfg.learning_rate);
    let mut drop_rng = seeding::rng(seeding::derive(cfg.seed, Stream::TrainDropout, 1));
    let mut history = TrainingHistory::default();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut best: Option<DenseNetwork> = None;

    for epoch in 0..cfg.max_epochs {
        let order = shuffled_indices(n, cfg.seed ^ 0x70, epoch);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(x, chunk);
            let batch = chunk.len();
            let dropout = net.sample_batch_dropout(batch, &mut drop_rng);
            let trace = net.forward_trace(xb.view(), TraceDropout::PerExample(&dropout))?;
            let logits = trace.outputs();
            let mut grads = Array2::zeros((batch, 1));
            let mut loss = 0.0;
            for (row, &idx) in chunk.iter().enumerate() {
                let z = logits[[row, 0]];
                let target = t[idx] as f64;
                loss += softplus(z) - target * z;
                grads[[row, 0]] = (sigmoid(z) - target) / batch as f64;
            }
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss;
            let (g, _) = net.backward(&trace, grads.view())?;
            adam.step(&mut net, &g)?;
        }

        net.check_finite().map_err(|source| TrainError::NonFinite { epoch, source })?;
        history.train_loss.push(epoch_loss / n as f64);

        let metric = match valid {
            Some((vx, vt)) => {
                let logits = net.forward_batch(vx, None)?;
                logits
                    .column(0)
                    .iter()
                    .zip(vt)
                    .map(|(&z, &tv)| softplus(z) - tv as f64 * z)
                    .sum::<f64>()
                    / vt.len() as f64
            }
            None => epoch_loss / n as f64,
        };
        history.valid_loss.push(metric);

        match stopper.observe(epoch, metric) {
            StopDecision::Improved => best = Some(net.clone()),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }

    if let Some(b) = best {
        net = b;
    }
    history.best_epoch = stopper.best_epoch();

    Ok(PropensityFit { model: PropensityModel::from_network(net), history })
}
