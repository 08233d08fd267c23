//! Per-individual CATE bounds under the marginal sensitivity model.
//!
//! For a confounding level `gamma >= 1`, the odds of treatment under the
//! (unobservable) complete propensity may deviate from the modeled
//! nominal propensity by at most a factor `gamma`. The set of expected
//! potential outcomes consistent with that assumption has sharp bounds
//! that reduce to a one-dimensional problem over a cut point in outcome
//! space; on `m` Monte-Carlo outcome draws the cut objective is convex
//! (lower) / concave (upper) in the cut index, so a single left-to-right
//! scan finds the extremum in `O(m)` after sorting.
//!
//! Parameter (epistemic) uncertainty enters by repeating the computation
//! under independent dropout-mask draws and expanding the mean bounds by
//! a multiple of their standard deviation (the predictive interval).

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdn::{MdnError, OutcomeMask, OutcomeModel};
use crate::nn::{DropoutMask, NnError};
use crate::propensity::PropensityModel;
use crate::seeding::{self, Stream};

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("gamma {0} must be >= 1")]
    InvalidGamma(f64),
    #[error("propensity {0} outside (0, 1)")]
    InvalidPropensity(f64),
    #[error("sensitivity spec invalid: {0}")]
    InvalidSpec(&'static str),
    #[error("cut index {k} outside [1, {m}]")]
    CutOutOfRange { k: usize, m: usize },
    #[error("outcome samples must be sorted ascending")]
    UnsortedSamples,
    #[error("need at least {need} outcome samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Mdn(#[from] MdnError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Assumed confounding level plus Monte-Carlo budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySpec {
    gamma: f64,
    param_samples: usize,
    outcome_samples: usize,
}

impl SensitivitySpec {
    /// Defaults: 50 parameter draws, 100 outcome draws.
    pub fn new(gamma: f64) -> Result<Self, MsmError> {
        Self::with_budgets(gamma, 50, 100)
    }

    pub fn with_budgets(
        gamma: f64,
        param_samples: usize,
        outcome_samples: usize,
    ) -> Result<Self, MsmError> {
        if !(gamma >= 1.0) {
            return Err(MsmError::InvalidGamma(gamma));
        }
        if param_samples < 1 {
            return Err(MsmError::InvalidSpec("need at least one parameter sample"));
        }
        if outcome_samples < 2 {
            return Err(MsmError::InvalidSpec("need at least two outcome samples"));
        }
        Ok(SensitivitySpec { gamma, param_samples, outcome_samples })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn param_samples(&self) -> usize {
        self.param_samples
    }

    pub fn outcome_samples(&self) -> usize {
        self.outcome_samples
    }
}

/// Bounds on the inverse complete propensity implied by `(e, gamma)`.
///
/// `alpha_prime` is `alpha / (beta - alpha)`; at `gamma = 1` the bounds
/// collapse (`alpha == beta`) and `alpha_prime` is the collapsed
/// sentinel `None` rather than a division by zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OddsBounds {
    pub alpha: f64,
    pub beta: f64,
    alpha_prime: Option<f64>,
}

impl OddsBounds {
    pub fn alpha_prime(&self) -> Option<f64> {
        self.alpha_prime
    }

    pub fn is_collapsed(&self) -> bool {
        self.alpha_prime.is_none()
    }
}

/// `alpha = 1/(gamma e) + 1 - 1/gamma`, `beta = gamma/e + 1 - gamma`.
pub fn odds_bounds(e: f64, gamma: f64) -> Result<OddsBounds, MsmError> {
    if !(gamma >= 1.0) {
        return Err(MsmError::InvalidGamma(gamma));
    }
    if !(e > 0.0 && e < 1.0) {
        return Err(MsmError::InvalidPropensity(e));
    }
    let alpha = 1.0 / (gamma * e) + 1.0 - 1.0 / gamma;
    let beta = gamma / e + 1.0 - gamma;
    let alpha_prime = (beta > alpha).then(|| alpha / (beta - alpha));
    Ok(OddsBounds { alpha, beta, alpha_prime })
}

/// One side of the expected-potential-outcome bound: the extremal value
/// and the cut index that attains it (`None` when the bounds collapse at
/// `gamma = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmBound {
    pub value: f64,
    pub cut: Option<usize>,
}

/// CATE interval; `lower == upper` exactly at `gamma = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CateInterval {
    pub lower: f64,
    pub upper: f64,
}

impl CateInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    /// Whether the interval straddles zero (ties count as straddling).
    pub fn straddles_zero(&self) -> bool {
        self.lower <= 0.0 && 0.0 <= self.upper
    }
}

fn check_sorted(samples: &[f64]) -> Result<(), MsmError> {
    if samples.windows(2).any(|w| w[0] > w[1]) {
        return Err(MsmError::UnsortedSamples);
    }
    Ok(())
}

// The two evaluation helpers below are the single arithmetic path for a
// cut objective; the standalone objective functions and the line-search
// scan both go through them so their values agree bitwise.

#[inline]
fn lower_value(mu_hat: f64, alpha_prime: f64, m: f64, k: usize, prefix_sum: f64) -> f64 {
    mu_hat + (prefix_sum / m) / (alpha_prime + k as f64 / m)
}

#[inline]
fn upper_value(mu_hat: f64, alpha_prime: f64, m: f64, k: usize, suffix_sum: f64) -> f64 {
    mu_hat + (suffix_sum / m) / (alpha_prime + 1.0 - k as f64 / m)
}

/// Lower cut objective at cut `k` (1-based): the discretized bound
/// objective over the `k` smallest outcome draws.
pub fn lower_objective(
    k: usize,
    sorted_samples: &[f64],
    mu_hat: f64,
    alpha_prime: f64,
) -> Result<f64, MsmError> {
    let m = sorted_samples.len();
    if k < 1 || k > m {
        return Err(MsmError::CutOutOfRange { k, m });
    }
    check_sorted(sorted_samples)?;
    let prefix: f64 = sorted_samples[..k].iter().map(|y| y - mu_hat).sum();
    Ok(lower_value(mu_hat, alpha_prime, m as f64, k, prefix))
}

/// Upper cut objective at cut `k` (1-based): mirror of
/// [`lower_objective`] over the `m - k` largest draws. The suffix is
/// accumulated right-to-left.
pub fn upper_objective(
    k: usize,
    sorted_samples: &[f64],
    mu_hat: f64,
    alpha_prime: f64,
) -> Result<f64, MsmError> {
    let m = sorted_samples.len();
    if k < 1 || k > m {
        return Err(MsmError::CutOutOfRange { k, m });
    }
    check_sorted(sorted_samples)?;
    let suffix: f64 = sorted_samples[k..].iter().rev().map(|y| y - mu_hat).sum();
    Ok(upper_value(mu_hat, alpha_prime, m as f64, k, suffix))
}

/// Sharp bounds on one arm's expected potential outcome from `m` sorted
/// outcome draws: a single left-to-right scan stopping at the first
/// non-improving cut (valid because the lower objective is convex and
/// the upper concave in the cut index). With collapsed odds (`gamma = 1`)
/// both bounds equal `mu_hat` exactly.
pub fn arm_bounds(
    sorted_samples: &[f64],
    mu_hat: f64,
    odds: &OddsBounds,
) -> Result<(ArmBound, ArmBound), MsmError> {
    let Some(alpha_prime) = odds.alpha_prime else {
        return Ok((ArmBound { value: mu_hat, cut: None }, ArmBound { value: mu_hat, cut: None }));
    };
    let m = sorted_samples.len();
    if m < 2 {
        return Err(MsmError::TooFewSamples { need: 2, got: m });
    }
    check_sorted(sorted_samples)?;
    let m_f = m as f64;

    // Lower: incremental prefix sums, same accumulation order as
    // `lower_objective`.
    let mut prefix = sorted_samples[0] - mu_hat;
    let mut current = lower_value(mu_hat, alpha_prime, m_f, 1, prefix);
    let mut lower = ArmBound { value: current, cut: Some(1) };
    for k in 1..m {
        prefix += sorted_samples[k] - mu_hat;
        let next = lower_value(mu_hat, alpha_prime, m_f, k + 1, prefix);
        if current <= next {
            break;
        }
        current = next;
        lower = ArmBound { value: next, cut: Some(k + 1) };
    }

    // Upper: right-to-left suffix sums, same order as `upper_objective`.
    let mut suffix = vec![0.0; m + 1];
    for j in (0..m).rev() {
        suffix[j] = suffix[j + 1] + (sorted_samples[j] - mu_hat);
    }
    let mut current = upper_value(mu_hat, alpha_prime, m_f, 1, suffix[1]);
    let mut upper = ArmBound { value: current, cut: Some(1) };
    for k in 1..m {
        let next = upper_value(mu_hat, alpha_prime, m_f, k + 1, suffix[k + 1]);
        if current >= next {
            break;
        }
        current = next;
        upper = ArmBound { value: next, cut: Some(k + 1) };
    }

    Ok((lower, upper))
}

/// Everything gamma-independent about one `(x, omega, arm)` evaluation:
/// the modeled propensity for the arm, the mixture mean, and the sorted
/// outcome draws. Bounds for any list of gamma values reuse these.
#[derive(Debug, Clone)]
pub struct ArmInputs {
    pub propensity: f64,
    pub mu_hat: f64,
    pub sorted_samples: Vec<f64>,
}

/// CATE interval for one posterior draw at one confounding level, from
/// precomputed arm inputs: upper = upper(1) - lower(0), lower =
/// lower(1) - upper(0).
pub fn interval_from_inputs(
    arm0: &ArmInputs,
    arm1: &ArmInputs,
    gamma: f64,
) -> Result<CateInterval, MsmError> {
    let odds0 = odds_bounds(arm0.propensity, gamma)?;
    let odds1 = odds_bounds(arm1.propensity, gamma)?;
    let (lo0, hi0) = arm_bounds(&arm0.sorted_samples, arm0.mu_hat, &odds0)?;
    let (lo1, hi1) = arm_bounds(&arm1.sorted_samples, arm1.mu_hat, &odds1)?;
    Ok(CateInterval { lower: lo1.value - hi0.value, upper: hi1.value - lo0.value })
}

/// One posterior draw over both models.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub outcome: OutcomeMask,
    pub propensity: DropoutMask,
}

/// Sample the `omega`-th posterior draw for a model pair, derived from
/// `seed` so draws are independent of evaluation order.
pub fn sample_draw(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    seed: u64,
    omega: usize,
) -> PosteriorDraw {
    let mut rng = seeding::rng(seeding::derive(seed, Stream::ParamSample, omega as u64));
    PosteriorDraw {
        outcome: outcome.sample_mask(&mut rng),
        propensity: propensity.sample_mask(&mut rng),
    }
}

fn arm_inputs_single(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    x: ArrayView1<'_, f64>,
    draw: &PosteriorDraw,
    spec: &SensitivitySpec,
    sample_seed: u64,
) -> Result<[ArmInputs; 2], MsmError> {
    let e1 = propensity.propensity_for_arm(x, 1, Some(&draw.propensity))?;
    let mut rng = seeding::rng(sample_seed);
    let mut build = |arm: u8, e: f64| -> Result<ArmInputs, MsmError> {
        let params = outcome.mixture_params(x, arm, Some(&draw.outcome))?;
        let mut samples = params.sample(spec.outcome_samples(), &mut rng);
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite outcome draws"));
        Ok(ArmInputs { propensity: e, mu_hat: params.mean(), sorted_samples: samples })
    };
    let arm0 = build(0, 1.0 - e1)?;
    let arm1 = build(1, e1)?;
    Ok([arm0, arm1])
}

/// CATE interval for a single posterior draw at `x`. Outcome draws are
/// seeded from `(seed, x_index, omega_index)` so the result does not
/// depend on evaluation order.
pub fn cate_interval_per_omega(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    x: ArrayView1<'_, f64>,
    draw: &PosteriorDraw,
    spec: &SensitivitySpec,
    sample_seed: u64,
) -> Result<CateInterval, MsmError> {
    let [arm0, arm1] = arm_inputs_single(outcome, propensity, x, draw, spec, sample_seed)?;
    interval_from_inputs(&arm0, &arm1, spec.gamma())
}

fn aggregate(lowers: &[f64], uppers: &[f64], multiplier: f64) -> (Stats, Stats, CateInterval) {
    let lo = Stats::from(lowers);
    let hi = Stats::from(uppers);
    let interval = CateInterval {
        lower: lo.mean - multiplier * lo.var.sqrt(),
        upper: hi.mean + multiplier * hi.var.sqrt(),
    };
    (lo, hi, interval)
}

#[derive(Debug, Clone, Copy)]
struct Stats {
    mean: f64,
    var: f64,
}

impl Stats {
    /// Mean and unbiased variance; variance is 0 for a single value.
    fn from(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        };
        Stats { mean, var }
    }
}

/// The 2-sigma predictive interval: per-draw bounds averaged over
/// posterior draws, expanded outward by two standard deviations.
pub fn predictive_interval(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    x: ArrayView1<'_, f64>,
    spec: &SensitivitySpec,
    seed: u64,
) -> Result<CateInterval, MsmError> {
    predictive_interval_scaled(outcome, propensity, x, spec, seed, 2.0)
}

/// Predictive interval with an explicit standard-deviation multiplier
/// (`0` drops the epistemic term, recovering the mean per-draw bounds).
pub fn predictive_interval_scaled(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    x: ArrayView1<'_, f64>,
    spec: &SensitivitySpec,
    seed: u64,
    multiplier: f64,
) -> Result<CateInterval, MsmError> {
    let mut lowers = Vec::with_capacity(spec.param_samples());
    let mut uppers = Vec::with_capacity(spec.param_samples());
    for omega in 0..spec.param_samples() {
        let draw = sample_draw(outcome, propensity, seed, omega);
        let sample_seed = seeding::derive2(seed, Stream::OutcomeSample, 0, omega as u64);
        let iv = cate_interval_per_omega(outcome, propensity, x, &draw, spec, sample_seed)?;
        lowers.push(iv.lower);
        uppers.push(iv.upper);
    }
    let (_, _, interval) = aggregate(&lowers, &uppers, multiplier);
    Ok(interval)
}

/// One output row of the batch interval table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalRow {
    pub x_index: usize,
    pub gamma: f64,
    pub tau_lower_mean: f64,
    pub tau_upper_mean: f64,
    pub tau_lower_var: f64,
    pub tau_upper_var: f64,
    pub predictive_lower: f64,
    pub predictive_upper: f64,
}

/// Compute the full interval table for a matrix of query points and a
/// list of confounding levels.
///
/// For each posterior draw the covariate features are evaluated once per
/// arm as a batched forward pass; sampling and sorting happen once per
/// `(x, omega, arm)` and are reused across the gamma grid. Work is
/// parallel over posterior draws; all randomness is derived from
/// `(seed, x_index, omega_index)` so results are scheduling-independent.
pub fn interval_table(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    xs: ArrayView2<'_, f64>,
    gammas: &[f64],
    param_samples: usize,
    outcome_samples: usize,
    seed: u64,
) -> Result<Vec<IntervalRow>, MsmError> {
    interval_table_scaled(
        outcome,
        propensity,
        xs,
        gammas,
        param_samples,
        outcome_samples,
        seed,
        2.0,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn interval_table_scaled(
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
    xs: ArrayView2<'_, f64>,
    gammas: &[f64],
    param_samples: usize,
    outcome_samples: usize,
    seed: u64,
    multiplier: f64,
) -> Result<Vec<IntervalRow>, MsmError> {
    for &g in gammas {
        if !(g >= 1.0) {
            return Err(MsmError::InvalidGamma(g));
        }
    }
    if param_samples < 1 {
        return Err(MsmError::InvalidSpec("need at least one parameter sample"));
    }
    if outcome_samples < 2 {
        return Err(MsmError::InvalidSpec("need at least two outcome samples"));
    }
    let n = xs.nrows();
    let n_gamma = gammas.len();

    // Per draw: bounds for every (x, gamma), flattened as x * n_gamma + g.
    let per_omega: Vec<Vec<(f64, f64)>> = (0..param_samples)
        .into_par_iter()
        .map(|omega| -> Result<Vec<(f64, f64)>, MsmError> {
            let draw = sample_draw(outcome, propensity, seed, omega);
            let features = outcome.features_batch(xs, Some(&draw.outcome))?;
            let raw0 = outcome.head_from_features(features.view(), 0, Some(&draw.outcome))?;
            let raw1 = outcome.head_from_features(features.view(), 1, Some(&draw.outcome))?;
            let e1s = propensity.treated_probability_batch(xs, Some(&draw.propensity))?;

            let mut rows = Vec::with_capacity(n * n_gamma);
            for i in 0..n {
                let sample_seed =
                    seeding::derive2(seed, Stream::OutcomeSample, i as u64, omega as u64);
                let mut rng = seeding::rng(sample_seed);
                let mut arm_from_raw = |raw: ArrayView1<'_, f64>, e: f64| -> Result<ArmInputs, MsmError> {
                    let params = outcome.params_from_raw_row(raw)?;
                    let mut samples = params.sample(outcome_samples, &mut rng);
                    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite outcome draws"));
                    Ok(ArmInputs { propensity: e, mu_hat: params.mean(), sorted_samples: samples })
                };
                let arm0 = arm_from_raw(raw0.row(i), 1.0 - e1s[i])?;
                let arm1 = arm_from_raw(raw1.row(i), e1s[i])?;
                for &gamma in gammas {
                    let iv = interval_from_inputs(&arm0, &arm1, gamma)?;
                    rows.push((iv.lower, iv.upper));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(n * n_gamma);
    let mut lowers = Vec::with_capacity(param_samples);
    let mut uppers = Vec::with_capacity(param_samples);
    for i in 0..n {
        for (g, &gamma) in gammas.iter().enumerate() {
            lowers.clear();
            uppers.clear();
            for draws in &per_omega {
                let (lo, hi) = draws[i * n_gamma + g];
                lowers.push(lo);
                uppers.push(hi);
            }
            let (lo_stats, hi_stats, interval) = aggregate(&lowers, &uppers, multiplier);
            out.push(IntervalRow {
                x_index: i,
                gamma,
                tau_lower_mean: lo_stats.mean,
                tau_upper_mean: hi_stats.mean,
                tau_lower_var: lo_stats.var,
                tau_upper_var: hi_stats.var,
                predictive_lower: interval.lower,
                predictive_upper: interval.upper,
            });
        }
    }
    Ok(out)
}
