//! One-dimensional structural causal model with a binary hidden
//! confounder at level `gamma_star`.
//!
//! `u ~ Bern(0.5)`, `x ~ Unif[-2, 2]`, `t ~ Bern(e(x, u))`, and
//! `y = (2t-1)x + (2t-1) - 2 sin(2(2t-1)x) - 2(2u-1)(1 + 0.5x) + N(0,1)`.
//! The complete propensity takes the extreme values allowed by the
//! sensitivity model at level `gamma_star` around the nominal
//! `e(x) = sigmoid(0.75x + 0.5)`: `e(x, u) = u/alpha + (1-u)/beta`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, ObservationalDataset, SplitTag};
use crate::mdn::MixtureParams;
use crate::msm::odds_bounds;
use crate::seeding::{self, Stream};

/// Closed-form ground truth for the confounded one-dimensional model.
/// Also used behind the MNIST variant, where the latent feature plays
/// the role of `x`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfoundedScm {
    gamma_star: f64,
}

impl ConfoundedScm {
    pub fn new(gamma_star: f64) -> Result<Self, DataError> {
        if !(gamma_star >= 1.0) {
            return Err(DataError::InvalidParam(format!("gamma_star {gamma_star} must be >= 1")));
        }
        Ok(ConfoundedScm { gamma_star })
    }

    pub fn gamma_star(&self) -> f64 {
        self.gamma_star
    }

    /// Noiseless outcome surface `m(x, t, u)`.
    pub fn outcome_surface(&self, x: f64, t: u8, u: u8) -> f64 {
        let sign = 2.0 * t as f64 - 1.0;
        let confounder = 2.0 * u as f64 - 1.0;
        sign * x + sign - 2.0 * (2.0 * sign * x).sin() - 2.0 * confounder * (1.0 + 0.5 * x)
    }

    /// True CATE `2x + 2 - 4 sin(2x)`; the confounder cancels in the
    /// unit-level effect.
    pub fn true_cate(&self, x: f64) -> f64 {
        2.0 * x + 2.0 - 4.0 * (2.0 * x).sin()
    }

    /// Unconfounded arm mean `E[Y^t | x]` (the confounder averages out).
    pub fn arm_mean(&self, x: f64, t: u8) -> f64 {
        0.5 * (self.outcome_surface(x, t, 0) + self.outcome_surface(x, t, 1))
    }

    /// Nominal propensity `sigmoid(0.75 x + 0.5)`.
    pub fn nominal_propensity(&self, x: f64) -> f64 {
        let z = 0.75 * x + 0.5;
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }

    /// Complete propensity `e(x, u) = u/alpha + (1-u)/beta` at the
    /// generator's confounding level.
    pub fn complete_propensity(&self, x: f64, u: u8) -> f64 {
        let odds = odds_bounds(self.nominal_propensity(x), self.gamma_star)
            .expect("nominal propensity is interior");
        if u == 1 {
            1.0 / odds.alpha
        } else {
            1.0 / odds.beta
        }
    }

    /// Realized `P(T = 1 | x)` of the generated data: the confounder
    /// average of the complete propensity. Differs from the printed
    /// nominal once `gamma_star > 1`.
    pub fn marginal_treated_probability(&self, x: f64) -> f64 {
        0.5 * (self.complete_propensity(x, 1) + self.complete_propensity(x, 0))
    }

    /// `P(u = 1 | T = t, x)` by Bayes' rule with `P(u = 1) = 0.5`.
    pub fn confounder_posterior(&self, x: f64, t: u8) -> f64 {
        let e1 = self.complete_propensity(x, 1);
        let e0 = self.complete_propensity(x, 0);
        if t == 1 {
            e1 / (e1 + e0)
        } else {
            (1.0 - e1) / ((1.0 - e1) + (1.0 - e0))
        }
    }

    /// Bias of the confounded regression estimand: the difference in
    /// arm-conditional means minus the true CATE,
    /// `-2 (2 + x) (P(u=1|T=1,x) - P(u=1|T=0,x))`.
    pub fn confounded_bias(&self, x: f64) -> f64 {
        let p1 = self.confounder_posterior(x, 1);
        let p0 = self.confounder_posterior(x, 0);
        -2.0 * (2.0 + x) * (p1 - p0)
    }

    /// Confounded arm-conditional mean `E[Y | T = t, x]`.
    pub fn conditional_arm_mean(&self, x: f64, t: u8) -> f64 {
        self.conditional_outcome_density(x, t).mean()
    }

    /// Realized conditional outcome density `f(y | x, T = t)`: a
    /// two-component unit-variance Gaussian mixture over the confounder
    /// posterior.
    pub fn conditional_outcome_density(&self, x: f64, t: u8) -> MixtureParams {
        let p1 = self.confounder_posterior(x, t);
        MixtureParams::new(
            vec![1.0 - p1, p1],
            vec![self.outcome_surface(x, t, 0), self.outcome_surface(x, t, 1)],
            vec![1.0, 1.0],
        )
        .expect("valid mixture")
    }

    /// Sample one unit at a fixed `x`; returns `(u, t, y0, y1)`.
    pub fn sample_unit_at(&self, x: f64, rng: &mut impl Rng) -> (u8, u8, f64, f64) {
        let u = u8::from(rng.random::<f64>() < 0.5);
        let t = u8::from(rng.random::<f64>() < self.complete_propensity(x, u));
        let noise: f64 = StandardNormal.sample(rng);
        let y0 = self.outcome_surface(x, 0, u) + noise;
        let y1 = self.outcome_surface(x, 1, u) + noise;
        (u, t, y0, y1)
    }
}

/// Generate `n` units from the confounded one-dimensional model.
pub fn generate_simulated(
    n: usize,
    gamma_star: f64,
    seed: u64,
) -> Result<(ObservationalDataset, ConfoundedScm), DataError> {
    if n == 0 {
        return Err(DataError::InvalidParam("n must be at least 1".into()));
    }
    let scm = ConfoundedScm::new(gamma_star)?;

    let mut covariates = Array2::zeros((n, 1));
    let mut treatments = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    let mut confounders = Vec::with_capacity(n);
    let mut potentials = Array2::zeros((n, 2));
    let mut cates = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = seeding::rng(seeding::derive(seed, Stream::DataGen, i as u64));
        let x: f64 = rng.random_range(-2.0..2.0);
        let (u, t, y0, y1) = scm.sample_unit_at(x, &mut rng);
        covariates[[i, 0]] = x;
        treatments.push(t);
        confounders.push(u);
        potentials[[i, 0]] = y0;
        potentials[[i, 1]] = y1;
        outcomes.push(if t == 1 { y1 } else { y0 });
        cates.push(scm.true_cate(x));
    }

    let latent = covariates.column(0).to_vec();
    let dataset = ObservationalDataset::new(
        covariates,
        treatments,
        outcomes,
        Some(confounders),
        Some(potentials),
        Some(cates),
        Some(latent),
        SplitTag::Full,
        seed,
    )?;
    Ok((dataset, scm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_cate_at_origin_is_two() {
        let scm = ConfoundedScm::new(std::f64::consts::E).unwrap();
        assert_eq!(scm.true_cate(0.0), 2.0);
        // Consistency with the outcome surfaces for both confounder values.
        for u in [0u8, 1] {
            let diff = scm.outcome_surface(0.0, 1, u) - scm.outcome_surface(0.0, 0, u);
            assert!((diff - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn nominal_propensity_at_origin() {
        let scm = ConfoundedScm::new(1.0).unwrap();
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((scm.nominal_propensity(0.0) - expected).abs() < 1e-15);
        assert!((scm.nominal_propensity(0.0) - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn gamma_one_collapses_complete_propensity() {
        let scm = ConfoundedScm::new(1.0).unwrap();
        for &x in &[-1.9, -0.3, 0.0, 1.2, 2.0] {
            let e = scm.nominal_propensity(x);
            assert!((scm.complete_propensity(x, 0) - e).abs() < 1e-12);
            assert!((scm.complete_propensity(x, 1) - e).abs() < 1e-12);
            assert!(scm.confounded_bias(x).abs() < 1e-12);
        }
    }

    #[test]
    fn treated_fraction_matches_nominal_at_gamma_one() {
        let n = 100_000;
        let (ds, scm) = generate_simulated(n, 1.0, 11).unwrap();
        let mut bins = vec![(0usize, 0usize); 8];
        for i in 0..n {
            let x = ds.covariates()[[i, 0]];
            let b = (((x + 2.0) / 0.5) as usize).min(7);
            bins[b].0 += ds.treatments()[i] as usize;
            bins[b].1 += 1;
        }
        for (b, &(treated, total)) in bins.iter().enumerate() {
            let center = -2.0 + 0.5 * b as f64 + 0.25;
            let freq = treated as f64 / total as f64;
            assert!(
                (freq - scm.nominal_propensity(center)).abs() < 0.03,
                "bin {b}: {freq} vs {}",
                scm.nominal_propensity(center)
            );
        }
    }

    #[test]
    fn treated_fraction_matches_marginal_at_high_gamma() {
        let n = 100_000;
        let gamma = 1.5f64.exp();
        let (ds, scm) = generate_simulated(n, gamma, 13).unwrap();
        let mut bins = vec![(0usize, 0usize); 8];
        for i in 0..n {
            let x = ds.covariates()[[i, 0]];
            let b = (((x + 2.0) / 0.5) as usize).min(7);
            bins[b].0 += ds.treatments()[i] as usize;
            bins[b].1 += 1;
        }
        for (b, &(treated, total)) in bins.iter().enumerate() {
            let center = -2.0 + 0.5 * b as f64 + 0.25;
            let freq = treated as f64 / total as f64;
            let expected = scm.marginal_treated_probability(center);
            let se = (expected * (1.0 - expected) / total as f64).sqrt();
            // 4 sigma plus bin-discretization slack
            assert!(
                (freq - expected).abs() < 4.0 * se + 0.01,
                "bin {b}: {freq} vs {expected}"
            );
        }
    }

    #[test]
    fn bias_vanishes_at_left_support_edge() {
        let scm = ConfoundedScm::new(4.0).unwrap();
        assert_eq!(scm.confounded_bias(-2.0), 0.0);
    }

    #[test]
    fn bias_matches_monte_carlo_at_origin() {
        // Independent simulation oracle: estimate E[y|T=1,x=0] -
        // E[y|T=0,x=0] - tau(0) from raw draws of the structural model.
        let scm = ConfoundedScm::new(std::f64::consts::E).unwrap();
        let mut rng = crate::seeding::rng(2024);
        let n = 1_000_000;
        let (mut sum1, mut n1, mut sum0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        let (mut sq1, mut sq0) = (0.0, 0.0);
        for _ in 0..n {
            let (_, t, y0, y1) = scm.sample_unit_at(0.0, &mut rng);
            if t == 1 {
                sum1 += y1;
                sq1 += y1 * y1;
                n1 += 1;
            } else {
                sum0 += y0;
                sq0 += y0 * y0;
                n0 += 1;
            }
        }
        let m1 = sum1 / n1 as f64;
        let m0 = sum0 / n0 as f64;
        let v1 = sq1 / n1 as f64 - m1 * m1;
        let v0 = sq0 / n0 as f64 - m0 * m0;
        let se = (v1 / n1 as f64 + v0 / n0 as f64).sqrt();
        let mc_bias = m1 - m0 - scm.true_cate(0.0);
        let closed = scm.confounded_bias(0.0);
        assert!(
            (mc_bias - closed).abs() <= 3.0 * se,
            "mc {mc_bias} vs closed-form {closed} (se {se})"
        );
        assert!(closed.abs() > 0.3, "bias should be material at gamma* = e");
    }

    #[test]
    fn conditional_density_matches_conditional_mean() {
        let scm = ConfoundedScm::new(2.0).unwrap();
        for &x in &[-1.0, 0.0, 0.7] {
            for t in [0u8, 1] {
                let f = scm.conditional_outcome_density(x, t);
                assert!((f.mean() - scm.conditional_arm_mean(x, t)).abs() < 1e-12);
            }
        }
        // Confounded arm means reproduce bias: (m1 - m0) - tau = bias.
        let x = 0.4;
        let diff = scm.conditional_arm_mean(x, 1) - scm.conditional_arm_mean(x, 0);
        assert!((diff - scm.true_cate(x) - scm.confounded_bias(x)).abs() < 1e-12);
    }

    #[test]
    fn potential_outcomes_are_consistent() {
        let (ds, scm) = generate_simulated(5000, 2.0, 3).unwrap();
        let po = ds.potential_outcomes().unwrap();
        for i in 0..ds.len() {
            let expected = po[[i, ds.treatments()[i] as usize]];
            assert_eq!(ds.outcomes()[i], expected);
            // ITE is exactly the true CATE (noise and confounder cancel).
            let x = ds.covariates()[[i, 0]];
            assert!((po[[i, 1]] - po[[i, 0]] - scm.true_cate(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn generation_is_order_independent_and_seeded() {
        let (a, _) = generate_simulated(100, 2.0, 5).unwrap();
        let (b, _) = generate_simulated(100, 2.0, 5).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        // A prefix of a longer run is identical: rows derive their own
        // seeds.
        let (long, _) = generate_simulated(200, 2.0, 5).unwrap();
        assert_eq!(&long.outcomes()[..100], a.outcomes());
    }
}
