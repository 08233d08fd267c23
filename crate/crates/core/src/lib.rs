//! CATE interval estimation under a bounded level of hidden confounding.
//!
//! This crate trains conditional-outcome and propensity models on
//! observational data, then computes per-individual bounds on the
//! conditional average treatment effect (CATE) that are valid when the
//! odds of treatment assignment may deviate from the modeled propensity
//! by at most a factor `gamma`. Model (epistemic) uncertainty is
//! propagated into the bounds by Monte-Carlo dropout, yielding a
//! predictive interval that widens off the training support.
//!
//! Modules:
//! - [`nn`] — minimal dense-network engine (ELU, dropout, Adam).
//! - [`mdn`] — Gaussian-mixture conditional outcome model.
//! - [`propensity`] — Bernoulli-likelihood treatment model.
//! - [`msm`] — the sensitivity bounds: per-parameter-sample CATE
//!   intervals via a discrete line search, plus the 2-sigma predictive
//!   aggregation.
//! - [`datagen`] — seeded benchmark generators with ground-truth oracles.
//! - [`policy`] — treatment policies, policy risk, deferral curves.
//! - [`experiment`] — config-driven experiment orchestration and artifacts.

pub mod datagen;
pub mod experiment;
pub mod mdn;
pub mod msm;
pub mod nn;
pub mod policy;
pub mod propensity;
pub mod seeding;
