//! Conditional outcome model `p(y | x, t)`: a Gaussian-mixture density
//! head over a dense trunk.
//!
//! The treatment indicator is appended to the network input as a feature
//! (optionally after a feature-extractor trunk for high-dimensional
//! covariates). The head emits, per mixture component, a mean, a raw
//! scale (softplus-transformed, floored), and a logit. Outcomes are
//! standardized per training split; predicted parameters are mapped back
//! to original units on every evaluation path, so callers only ever see
//! original-unit quantities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf;
use thiserror::Error;

use crate::nn::train::{
    shuffled_indices, EarlyStop, StopDecision, TrainConfig, TrainError, TrainingHistory,
};
use crate::nn::{AdamState, DenseNetwork, DropoutMask, NnError, TraceDropout};
use crate::seeding::{self, Stream};

/// Lower bound on component scales in standardized space; keeps the
/// likelihood away from degenerate spikes.
pub const SIGMA_FLOOR: f64 = 1e-3;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum MdnError {
    #[error("mixture weights sum to {sum}, expected 1 within 1e-6")]
    WeightsNotNormalized { sum: f64 },
    #[error("mixture component {index} has non-positive scale {value}")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("mixture must have at least one component")]
    Empty,
    #[error("mixture parameter is not finite")]
    NonFiniteParam,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite density for sample {index}")]
    NonFiniteDensity { index: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Parameters of a `J`-component Gaussian mixture in outcome units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self, MdnError> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len() {
            return Err(MdnError::Empty);
        }
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(MdnError::WeightsNotNormalized { sum });
        }
        for (index, &s) in sds.iter().enumerate() {
            if !(s > 0.0) {
                return Err(MdnError::NonPositiveScale { index, value: s });
            }
        }
        if weights.iter().chain(&means).chain(&sds).any(|v| !v.is_finite()) {
            return Err(MdnError::NonFiniteParam);
        }
        Ok(MixtureParams { weights, means, sds })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sds(&self) -> &[f64] {
        &self.sds
    }

    /// First moment: `sum_j pi_j mu_j`.
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Log density at `y`, evaluated stably via log-sum-exp.
    pub fn log_density(&self, y: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((&w, &m), &s)| {
                let z = (y - m) / s;
                let t = w.ln() - 0.5 * LN_2PI - s.ln() - 0.5 * z * z;
                if t > max {
                    max = t;
                }
                t
            })
            .collect();
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Mixture CDF `P(Y <= y)`.
    pub fn cdf(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((&w, &m), &s)| w * std_normal_cdf((y - m) / s))
            .sum()
    }

    /// Draw `m` i.i.d. outcomes: pick a component by weight, then sample
    /// its Gaussian.
    pub fn sample(&self, m: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..m)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = self.weights.len() - 1;
                for (i, &w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        j = i;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                self.means[j] + self.sds[j] * z
            })
            .collect()
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A dropout-mask draw covering both stages of an [`OutcomeModel`].
#[derive(Debug, Clone)]
pub struct OutcomeMask {
    pub extractor: Option<DropoutMask>,
    pub head: DropoutMask,
}

/// Mixture-density outcome model with optional feature extractor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeModel {
    extractor: Option<DenseNetwork>,
    head: DenseNetwork,
    components: usize,
    y_mean: f64,
    y_std: f64,
}

impl OutcomeModel {
    /// Assemble a model from already-built networks. The head must emit
    /// `3 * components` outputs; `(y_mean, y_std)` define the outcome
    /// standardization recorded with the model.
    pub fn from_parts(
        extractor: Option<DenseNetwork>,
        head: DenseNetwork,
        components: usize,
        y_mean: f64,
        y_std: f64,
    ) -> Result<Self, MdnError> {
        if head.output_dim() != 3 * components || components == 0 {
            return Err(MdnError::Empty);
        }
        Ok(OutcomeModel { extractor, head, components, y_mean, y_std })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// `(mean, std)` of the training outcomes used for standardization.
    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    pub fn input_dim(&self) -> usize {
        match &self.extractor {
            Some(e) => e.input_dim(),
            None => self.head.input_dim() - 1,
        }
    }

    /// Sample one posterior draw (a dropout mask for every stage).
    pub fn sample_mask(&self, rng: &mut impl Rng) -> OutcomeMask {
        OutcomeMask {
            extractor: self.extractor.as_ref().map(|e| e.sample_mask(rng)),
            head: self.head.sample_mask(rng),
        }
    }

    /// Covariate features prior to the treatment concatenation. For
    /// models without an extractor this is the identity.
    pub fn features_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        mask: Option<&OutcomeMask>,
    ) -> Result<Array2<f64>, MdnError> {
        match &self.extractor {
            Some(e) => Ok(e.forward_batch(xs, mask.and_then(|m| m.extractor.as_ref()))?),
            None => Ok(xs.to_owned()),
        }
    }

    /// Raw head outputs for features evaluated under one treatment arm.
    pub fn head_from_features(
        &self,
        features: ArrayView2<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
    ) -> Result<Array2<f64>, MdnError> {
        let inputs = append_column(features, t as f64);
        Ok(self.head.forward_batch(inputs.view(), mask.map(|m| &m.head))?)
    }

    /// Mixture parameters (original outcome units) for each row of `xs`
    /// under treatment arm `t` and a fixed mask.
    pub fn mixture_params_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
    ) -> Result<Vec<MixtureParams>, MdnError> {
        let features = self.features_batch(xs, mask)?;
        let raw = self.head_from_features(features.view(), t, mask)?;
        raw.rows().into_iter().map(|row| self.params_from_raw(row)).collect()
    }

    pub fn mixture_params(
        &self,
        x: ArrayView1<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
    ) -> Result<MixtureParams, MdnError> {
        let xs = x.insert_axis(Axis(0));
        Ok(self.mixture_params_batch(xs, t, mask)?.pop().expect("one row"))
    }

    /// `E[y | x, t]` under the predicted mixture: `sum_j pi_j mu_j`.
    pub fn conditional_mean(
        &self,
        x: ArrayView1<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
    ) -> Result<f64, MdnError> {
        Ok(self.mixture_params(x, t, mask)?.mean())
    }

    /// Draw `m` outcomes from `p(y | x, t)`; reproducible under the
    /// caller's RNG seed.
    pub fn sample_outcomes(
        &self,
        x: ArrayView1<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
        m: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, MdnError> {
        Ok(self.mixture_params(x, t, mask)?.sample(m, rng))
    }

    /// `P(Y <= y_star | x, t)` under the predicted mixture.
    pub fn cdf(
        &self,
        x: ArrayView1<'_, f64>,
        t: u8,
        mask: Option<&OutcomeMask>,
        y_star: f64,
    ) -> Result<f64, MdnError> {
        Ok(self.mixture_params(x, t, mask)?.cdf(y_star))
    }

    /// Mean negative log density of the observed outcomes under the
    /// predicted mixtures (original units).
    pub fn nll_loss(
        &self,
        xs: ArrayView2<'_, f64>,
        ts: &[u8],
        ys: &[f64],
        mask: Option<&OutcomeMask>,
    ) -> Result<f64, MdnError> {
        if xs.nrows() == 0 {
            return Err(MdnError::EmptyBatch);
        }
        let features = self.features_batch(xs, mask)?;
        let mut total = 0.0;
        // Group rows by arm so each arm is one batched head pass.
        for arm in [0u8, 1u8] {
            let rows: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = gather_rows(features.view(), &rows);
            let raw = self.head_from_features(sub.view(), arm, mask)?;
            for (ri, row) in raw.rows().into_iter().enumerate() {
                let params = self.params_from_raw(row)?;
                let ld = params.log_density(ys[rows[ri]]);
                if !ld.is_finite() {
                    return Err(MdnError::NonFiniteDensity { index: rows[ri] });
                }
                total += -ld;
            }
        }
        Ok(total / xs.nrows() as f64)
    }

    /// Map one raw head row (as produced by [`Self::head_from_features`])
    /// to original-unit mixture parameters.
    pub fn params_from_raw_row(&self, raw: ArrayView1<'_, f64>) -> Result<MixtureParams, MdnError> {
        self.params_from_raw(raw)
    }

    /// Map one raw head row (means, raw scales, logits in standardized
    /// space) to original-unit mixture parameters.
    fn params_from_raw(&self, raw: ArrayView1<'_, f64>) -> Result<MixtureParams, MdnError> {
        let j = self.components;
        let row = raw.as_slice().expect("contiguous row");
        let logits = &row[2 * j..3 * j];
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let means: Vec<f64> = (0..j).map(|k| self.y_mean + self.y_std * row[k]).collect();
        let sds: Vec<f64> =
            (0..j).map(|k| self.y_std * (softplus(row[j + k]) + SIGMA_FLOOR)).collect();
        MixtureParams::new(weights, means, sds)
    }
}

fn append_column(m: ArrayView2<'_, f64>, value: f64) -> Array2<f64> {
    let (rows, cols) = m.dim();
    let mut out = Array2::zeros((rows, cols + 1));
    out.slice_mut(ndarray::s![.., ..cols]).assign(&m);
    out.column_mut(cols).fill(value);
    out
}

pub(crate) fn gather_rows(m: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

/// Per-example NLL (standardized space) and its gradient w.r.t. the raw
/// head outputs.
fn nll_and_grad(raw: ArrayView1<'_, f64>, v: f64, j: usize, grad: &mut [f64]) -> f64 {
    let r = raw.as_slice().expect("contiguous row");
    let (means, rest) = r.split_at(j);
    let (scales_raw, logits) = rest.split_at(j);

    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_logits = max_logit + logits.iter().map(|&l| (l - max_logit).exp()).sum::<f64>().ln();

    let mut a = vec![0.0; j];
    let mut sds = vec![0.0; j];
    let mut a_max = f64::NEG_INFINITY;
    for k in 0..j {
        let s = softplus(scales_raw[k]) + SIGMA_FLOOR;
        sds[k] = s;
        let z = (v - means[k]) / s;
        a[k] = (logits[k] - lse_logits) - 0.5 * LN_2PI - s.ln() - 0.5 * z * z;
        if a[k] > a_max {
            a_max = a[k];
        }
    }
    let lse_a = a_max + a.iter().map(|&t| (t - a_max).exp()).sum::<f64>().ln();

    for k in 0..j {
        let gamma = (a[k] - lse_a).exp();
        let pi = (logits[k] - lse_logits).exp();
        let diff = v - means[k];
        let s = sds[k];
        grad[k] = -gamma * diff / (s * s);
        grad[j + k] = gamma * (1.0 / s - diff * diff / (s * s * s)) * sigmoid(scales_raw[k]);
        grad[2 * j + k] = pi - gamma;
    }
    -lse_a
}

/// A fitted outcome model together with its training curves.
#[derive(Debug)]
pub struct OutcomeFit {
    pub model: OutcomeModel,
    pub history: TrainingHistory,
}

/// Train a mixture-density outcome model by mean negative log likelihood
/// with adaptive-moment updates and patience-based early stopping on the
/// validation split (evaluated without dropout). The best-validation
/// parameters are restored at the end.
pub fn fit_outcome(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    y: &[f64],
    valid: Option<(ArrayView2<'_, f64>, &[u8], &[f64])>,
    cfg: &TrainConfig,
) -> Result<OutcomeFit, TrainError> {
    let n = x.nrows();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if t.len() != n || y.len() != n {
        return Err(TrainError::LengthMismatch { inputs: n, targets: t.len().min(y.len()) });
    }

    let y_mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let y_std = if sd > 1e-12 { sd } else { 1.0 };
    let v_targets: Vec<f64> = y.iter().map(|yy| (yy - y_mean) / y_std).collect();

    let d = x.ncols();
    let mut extractor = if cfg.extractor_hidden.is_empty() {
        None
    } else {
        Some(DenseNetwork::init_trunk(d, &cfg.extractor_hidden, cfg.dropout_rate, cfg.seed)?)
    };
    let feat_dim = cfg.extractor_hidden.last().copied().unwrap_or(d);
    let mut head = DenseNetwork::init(
        feat_dim + 1,
        &cfg.head_hidden,
        3 * cfg.components,
        cfg.dropout_rate,
        cfg.seed,
    )?;

    let mut adam_extractor =
        extractor.as_ref().map(|e| AdamState::with_learning_rate(e, cfg.learning_rate));
    let mut adam_head = AdamState::with_learning_rate(&head, cfg.learning_rate);

    let mut drop_rng = seeding::rng(seeding::derive(cfg.seed, Stream::TrainDropout, 0));
    let mut history = TrainingHistory::default();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut best: Option<(Option<DenseNetwork>, DenseNetwork)> = None;
    let j = cfg.components;

    for epoch in 0..cfg.max_epochs {
        let order = shuffled_indices(n, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(x, chunk);
            let batch = chunk.len();

            // Stage 1: features.
            let (feat_trace, features) = match &extractor {
                Some(e) => {
                    let dropout = e.sample_batch_dropout(batch, &mut drop_rng);
                    let trace = e.forward_trace(xb.view(), TraceDropout::PerExample(&dropout))?;
                    let f = trace.outputs().to_owned();
                    (Some(trace), f)
                }
                None => (None, xb),
            };

            // Stage 2: head over [features, t].
            let mut inputs = Array2::zeros((batch, features.ncols() + 1));
            inputs.slice_mut(ndarray::s![.., ..features.ncols()]).assign(&features);
            for (row, &idx) in chunk.iter().enumerate() {
                inputs[[row, features.ncols()]] = t[idx] as f64;
            }
            let head_dropout = head.sample_batch_dropout(batch, &mut drop_rng);
            let head_trace =
                head.forward_trace(inputs.view(), TraceDropout::PerExample(&head_dropout))?;

            let raw = head_trace.outputs();
            let mut grads = Array2::zeros((batch, 3 * j));
            let mut loss = 0.0;
            for (row, &idx) in chunk.iter().enumerate() {
                loss += nll_and_grad(
                    raw.row(row),
                    v_targets[idx],
                    j,
                    grads.row_mut(row).as_slice_mut().expect("contiguous"),
                );
            }
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss /= batch as f64;
            grads.mapv_inplace(|g| g / batch as f64);
            epoch_loss += loss * batch as f64;

            let (head_grads, input_grads) = head.backward(&head_trace, grads.view())?;
            adam_head.step(&mut head, &head_grads)?;

            if let (Some(e), Some(trace)) = (extractor.as_mut(), feat_trace.as_ref()) {
                let feat_grads = input_grads.slice(ndarray::s![.., ..features.ncols()]);
                let (e_grads, _) = e.backward(trace, feat_grads)?;
                adam_extractor.as_mut().expect("state exists").step(e, &e_grads)?;
            }
        }

        head.check_finite().map_err(|source| TrainError::NonFinite { epoch, source })?;
        if let Some(e) = &extractor {
            e.check_finite().map_err(|source| TrainError::NonFinite { epoch, source })?;
        }

        history.train_loss.push(epoch_loss / n as f64 + y_std.ln());

        let metric = match valid {
            Some((vx, vt, vy)) => {
                let model = OutcomeModel {
                    extractor: extractor.clone(),
                    head: head.clone(),
                    components: j,
                    y_mean,
                    y_std,
                };
                model
                    .nll_loss(vx, vt, vy, None)
                    .map_err(|_| TrainError::NonFiniteLoss { epoch, batch: usize::MAX })?
            }
            None => epoch_loss / n as f64 + y_std.ln(),
        };
        history.valid_loss.push(metric);

        match stopper.observe(epoch, metric) {
            StopDecision::Improved => best = Some((extractor.clone(), head.clone())),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }

    if let Some((be, bh)) = best {
        extractor = be;
        head = bh;
    }
    history.best_epoch = stopper.best_epoch();

    Ok(OutcomeFit {
        model: OutcomeModel { extractor, head, components: j, y_mean, y_std },
        history,
    })
}
