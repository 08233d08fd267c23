//! Infant-health semi-synthetic benchmark with one hidden confounder.
//!
//! Covariates come from the 747-row study table (25 covariates plus
//! treatment). Covariate 9 — married when the child was born — is
//! associated with treatment; outcomes are generated from the
//! exponential/linear response surface with an extra coefficient on that
//! covariate, and it is then withheld from the released matrix, so the
//! released data carry real hidden confounding.
//!
//! When the study table is unavailable a clearly-labeled surrogate with
//! the published marginal frequencies keeps the pipeline runnable.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{DataError, ObservationalDataset, SplitTag};
use crate::seeding::{self, Stream};

/// Rows in the study table.
pub const IHDP_ROWS: usize = 747;
/// Treated units in the study table.
pub const IHDP_TREATED: usize = 139;
/// Index (0-based, within x1..x25) of the hidden confounder x9.
const HIDDEN_INDEX: usize = 8;
/// Continuous covariates are x1..x6.
const N_CONTINUOUS: usize = 6;

/// Published `P(x = 1)` for the binary covariates x7..x25.
pub const IHDP_BINARY_FREQUENCIES: [f64; 19] = [
    0.51, 0.09, 0.52, 0.36, 0.27, 0.22, 0.36, 0.48, 0.14, 0.96, 0.59, 0.96, 0.14, 0.14, 0.16,
    0.08, 0.07, 0.13, 0.16,
];

/// Sampled response-surface coefficients and the treated-group offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IhdpOracle {
    pub beta_x: Vec<f64>,
    pub beta_u: f64,
    pub omega_s: f64,
    pub surrogate_covariates: bool,
}

impl IhdpOracle {
    /// Noiseless potential outcomes for one released row at confounder
    /// value `u`: `(y0, y1)`.
    pub fn surfaces(&self, x_released: ArrayView1<'_, f64>, u: u8) -> (f64, f64) {
        let uf = u as f64;
        let lin: f64 = self.beta_x.iter().zip(x_released.iter()).map(|(b, x)| b * x).sum();
        let lin_offset: f64 =
            self.beta_x.iter().zip(x_released.iter()).map(|(b, x)| b * (x + 0.5)).sum();
        let y0 = (lin_offset + self.beta_u * (uf + 0.5)).exp();
        let y1 = lin + self.beta_u * uf - self.omega_s;
        (y0, y1)
    }

    /// Noiseless unit-level effect at `(x, u)`.
    pub fn tau(&self, x_released: ArrayView1<'_, f64>, u: u8) -> f64 {
        let (y0, y1) = self.surfaces(x_released, u);
        y1 - y0
    }

    /// How much the hidden confounder moves the unit-level effect:
    /// `tau(x, 1) - tau(x, 0)`. Identically zero when `beta_u = 0`, in
    /// which case the generator reduces to the unconfounded response
    /// surface.
    pub fn bias_from_u(&self, x_released: ArrayView1<'_, f64>) -> f64 {
        self.tau(x_released, 1) - self.tau(x_released, 0)
    }
}

/// The raw study table: 25 covariates plus a treatment column.
struct CovariateTable {
    covariates: Array2<f64>,
    treatments: Vec<u8>,
    surrogate: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn load_table(path: &Path) -> Result<CovariateTable, DataError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| DataError::BadTable(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::BadTable(e.to_string()))?
        .clone();
    let mut wanted: Vec<String> = vec!["treatment".into()];
    wanted.extend((1..=25).map(|i| format!("x{i}")));
    let mut positions = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for name in &wanted {
        match headers.iter().position(|h| h == name) {
            Some(p) => positions.push(p),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MalformedTable { missing });
    }
    let mut covariates = Vec::new();
    let mut treatments = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::BadTable(e.to_string()))?;
        let parse = |pos: usize| -> Result<f64, DataError> {
            record
                .get(pos)
                .ok_or_else(|| DataError::BadTable(format!("row {row_idx} too short")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| DataError::BadTable(format!("row {row_idx}: {e}")))
        };
        let t = parse(positions[0])?;
        if t != 0.0 && t != 1.0 {
            return Err(DataError::BadTable(format!("row {row_idx}: treatment {t} not binary")));
        }
        treatments.push(t as u8);
        for &p in &positions[1..] {
            covariates.push(parse(p)?);
        }
    }
    if treatments.len() != IHDP_ROWS {
        return Err(DataError::BadTable(format!(
            "expected {IHDP_ROWS} rows, found {}",
            treatments.len()
        )));
    }
    let covariates = Array2::from_shape_vec((IHDP_ROWS, 25), covariates)
        .expect("row-major table");
    Ok(CovariateTable { covariates, treatments, surrogate: false })
}

/// Surrogate table with the published marginal frequencies; treatment is
/// logistic in the confounder (and two other maternal covariates) with
/// the intercept calibrated so the expected treated count matches the
/// study.
fn surrogate_table(seed: u64) -> CovariateTable {
    let mut rng = seeding::rng(seeding::derive(seed, Stream::DataGen, 900));
    let mut covariates = Array2::zeros((IHDP_ROWS, 25));
    for i in 0..IHDP_ROWS {
        for j in 0..N_CONTINUOUS {
            let z: f64 = StandardNormal.sample(&mut rng);
            covariates[[i, j]] = z;
        }
        for (k, &p) in IHDP_BINARY_FREQUENCIES.iter().enumerate() {
            covariates[[i, N_CONTINUOUS + k]] = f64::from(rng.random::<f64>() < p);
        }
    }
    // Treatment depends on x9 (hidden later), x14, x17.
    let lin = |i: usize| -> f64 {
        0.8 * covariates[[i, 8]] + 0.3 * covariates[[i, 13]] + 0.3 * covariates[[i, 16]]
    };
    let target = IHDP_TREATED as f64 / IHDP_ROWS as f64;
    let (mut lo, mut hi) = (-8.0, 8.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let mean: f64 =
            (0..IHDP_ROWS).map(|i| sigmoid(mid + lin(i))).sum::<f64>() / IHDP_ROWS as f64;
        if mean > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);
    let treatments: Vec<u8> = (0..IHDP_ROWS)
        .map(|i| u8::from(rng.random::<f64>() < sigmoid(intercept + lin(i))))
        .collect();
    CovariateTable { covariates, treatments, surrogate: true }
}

/// Generate the hidden-confounding variant: covariate x9 drives both
/// treatment (through the study's assignment) and the synthetic
/// outcomes, and is withheld from the released covariates. The
/// treated-group offset is chosen so the empirical effect on the
/// treated, from the stored potential outcomes, is exactly 4.
pub fn generate_ihdp(
    covariate_table: Option<&Path>,
    seed: u64,
) -> Result<(ObservationalDataset, IhdpOracle), DataError> {
    let table = match covariate_table {
        Some(path) => load_table(path)?,
        None => surrogate_table(seed),
    };
    let n = table.treatments.len();
    let treated: Vec<usize> = (0..n).filter(|&i| table.treatments[i] == 1).collect();
    if treated.is_empty() || treated.len() == n {
        return Err(DataError::BadTable("treatment column is single-class".into()));
    }

    // Standardize the continuous covariates over the table.
    let mut covariates = table.covariates;
    for j in 0..N_CONTINUOUS {
        let col = covariates.column(j);
        let mean = col.sum() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        covariates.column_mut(j).mapv_inplace(|v| (v - mean) / sd);
    }

    let u: Vec<u8> = covariates.column(HIDDEN_INDEX).iter().map(|&v| v as u8).collect();
    let released_cols: Vec<usize> = (0..25).filter(|&j| j != HIDDEN_INDEX).collect();
    let mut released = Array2::zeros((n, 24));
    for (jj, &j) in released_cols.iter().enumerate() {
        released.column_mut(jj).assign(&covariates.column(j));
    }

    // Response-surface coefficients.
    let mut beta_rng = seeding::rng(seeding::derive(seed, Stream::DataGen, 901));
    let beta_x: Vec<f64> = (0..24)
        .map(|_| {
            let r: f64 = beta_rng.random();
            if r < 0.6 {
                0.0
            } else if r < 0.7 {
                0.1
            } else if r < 0.8 {
                0.2
            } else if r < 0.9 {
                0.3
            } else {
                0.4
            }
        })
        .collect();
    let beta_u = 0.1 * (1.0 + beta_rng.random_range(0..5u32) as f64);

    // Potential outcomes with the offset fixed afterward so the treated
    // rows' stored effect averages exactly 4.
    let mut y0 = Vec::with_capacity(n);
    let mut y1_pre = Vec::with_capacity(n);
    for i in 0..n {
        let mut row_rng = seeding::rng(seeding::derive(seed, Stream::DataGen, i as u64));
        let noise0: f64 = StandardNormal.sample(&mut row_rng);
        let noise1: f64 = StandardNormal.sample(&mut row_rng);
        let x = released.row(i);
        let uf = u[i] as f64;
        let lin: f64 = beta_x.iter().zip(x.iter()).map(|(b, v)| b * v).sum();
        let lin_offset: f64 = beta_x.iter().zip(x.iter()).map(|(b, v)| b * (v + 0.5)).sum();
        y0.push((lin_offset + beta_u * (uf + 0.5)).exp() + noise0);
        y1_pre.push(lin + beta_u * uf + noise1);
    }
    let omega_s = treated.iter().map(|&i| y1_pre[i] - y0[i]).sum::<f64>() / treated.len() as f64
        - 4.0;
    let oracle = IhdpOracle { beta_x, beta_u, omega_s, surrogate_covariates: table.surrogate };

    let mut potentials = Array2::zeros((n, 2));
    let mut outcomes = Vec::with_capacity(n);
    let mut cates = Vec::with_capacity(n);
    for i in 0..n {
        let y1 = y1_pre[i] - omega_s;
        potentials[[i, 0]] = y0[i];
        potentials[[i, 1]] = y1;
        outcomes.push(if table.treatments[i] == 1 { y1 } else { y0[i] });
        cates.push(oracle.tau(released.row(i), u[i]));
    }

    let dataset = ObservationalDataset::new(
        released,
        table.treatments,
        outcomes,
        Some(u),
        Some(potentials),
        Some(cates),
        None,
        SplitTag::Full,
        seed,
    )?;
    Ok((dataset, oracle))
}

/// The study's split sizes: 470 train, 202 validation, 75 test.
pub const IHDP_SPLIT: (usize, usize, usize) = (470, 202, 75);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::split;

    #[test]
    fn released_matrix_has_24_columns() {
        let (ds, _) = generate_ihdp(None, 0).unwrap();
        assert_eq!(ds.dim(), 24);
        assert_eq!(ds.len(), IHDP_ROWS);
        assert!(ds.hidden_confounder().is_some());
    }

    #[test]
    fn zero_confounder_coefficient_means_zero_bias() {
        let oracle = IhdpOracle {
            beta_x: vec![0.2; 24],
            beta_u: 0.0,
            omega_s: 1.3,
            surrogate_covariates: true,
        };
        let x = Array1::from_shape_fn(24, |j| (j as f64) * 0.05 - 0.5);
        assert_eq!(oracle.bias_from_u(x.view()), 0.0);
        let (y0_a, y1_a) = oracle.surfaces(x.view(), 0);
        let (y0_b, y1_b) = oracle.surfaces(x.view(), 1);
        assert_eq!((y0_a, y1_a), (y0_b, y1_b));
    }

    #[test]
    fn nonzero_confounder_coefficient_moves_tau() {
        let (_, oracle) = generate_ihdp(None, 4).unwrap();
        assert!(oracle.beta_u >= 0.1);
        let x = Array1::zeros(24);
        assert!(oracle.bias_from_u(x.view()).abs() > 1e-6);
    }

    #[test]
    fn treated_group_effect_is_exactly_four() {
        for seed in 0..5 {
            let (ds, _) = generate_ihdp(None, seed).unwrap();
            let po = ds.potential_outcomes().unwrap();
            let treated: Vec<usize> =
                (0..ds.len()).filter(|&i| ds.treatments()[i] == 1).collect();
            let catt: f64 = treated.iter().map(|&i| po[[i, 1]] - po[[i, 0]]).sum::<f64>()
                / treated.len() as f64;
            assert!((catt - 4.0).abs() < 1e-9, "seed {seed}: CATT {catt}");
        }
    }

    #[test]
    fn stored_cate_matches_noiseless_surfaces() {
        let (ds, oracle) = generate_ihdp(None, 8).unwrap();
        let u = ds.hidden_confounder().unwrap();
        for i in (0..ds.len()).step_by(97) {
            let tau = oracle.tau(ds.covariates().row(i), u[i]);
            assert_eq!(ds.oracle_cate().unwrap()[i], tau);
        }
    }

    #[test]
    fn study_split_sizes() {
        let (ds, _) = generate_ihdp(None, 1).unwrap();
        let (train, valid, test) = split(&ds, ihdp_split_fractions(), 1).unwrap();
        assert_eq!((train.len(), valid.len(), test.len()), (470, 202, 75));
    }

    #[test]
    fn surrogate_marginals_match_published_frequencies() {
        // Average over seeds; binary marginals should track the table.
        let mut freq = [0.0f64; 19];
        let reps = 30;
        for seed in 0..reps {
            let (ds, oracle) = generate_ihdp(None, seed).unwrap();
            assert!(oracle.surrogate_covariates);
            // Released columns: x1..x8 at 0..8, then x10.. at 8..
            // Binary released covariates are columns 6..24 minus the
            // hidden one; reconstruct from the full frequency list.
            let released_freqs: Vec<f64> = IHDP_BINARY_FREQUENCIES
                .iter()
                .enumerate()
                .filter(|(k, _)| N_CONTINUOUS + k != HIDDEN_INDEX)
                .map(|(_, &p)| p)
                .collect();
            for (jj, expected) in released_freqs.iter().enumerate() {
                let col = ds.covariates().column(N_CONTINUOUS + jj).sum() / ds.len() as f64;
                freq[jj] += (col - expected) / reps as f64;
            }
        }
        for (k, dev) in freq.iter().take(18).enumerate() {
            assert!(dev.abs() < 0.02, "binary covariate {k} deviates by {dev}");
        }
    }

    #[test]
    fn treated_count_tracks_study() {
        let mut total = 0usize;
        let reps = 20;
        for seed in 100..100 + reps {
            let (ds, _) = generate_ihdp(None, seed).unwrap();
            total += ds.treatments().iter().filter(|&&t| t == 1).count();
        }
        let mean = total as f64 / reps as f64;
        assert!((mean - IHDP_TREATED as f64).abs() < 15.0, "mean treated {mean}");
    }

    #[test]
    fn confounder_is_associated_with_treatment() {
        let (ds, _) = generate_ihdp(None, 3).unwrap();
        let u = ds.hidden_confounder().unwrap();
        let t = ds.treatments();
        let p_u_treated = (0..ds.len())
            .filter(|&i| t[i] == 1)
            .map(|i| u[i] as f64)
            .sum::<f64>()
            / t.iter().filter(|&&v| v == 1).count() as f64;
        let p_u_control = (0..ds.len())
            .filter(|&i| t[i] == 0)
            .map(|i| u[i] as f64)
            .sum::<f64>()
            / t.iter().filter(|&&v| v == 0).count() as f64;
        assert!(
            p_u_treated - p_u_control > 0.05,
            "confounder-treatment association too weak: {p_u_treated} vs {p_u_control}"
        );
    }

    #[test]
    fn missing_columns_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        std::fs::write(&path, "treatment,x1,x2\n1,0.5,0.25\n").unwrap();
        match generate_ihdp(Some(&path), 0) {
            Err(DataError::MalformedTable { missing }) => {
                assert!(missing.contains(&"x3".to_string()));
                assert!(missing.contains(&"x25".to_string()));
                assert_eq!(missing.len(), 23);
            }
            other => panic!("expected malformed-table error, got {other:?}"),
        }
    }

    #[test]
    fn real_table_round_trips_through_loader() {
        // Build a well-formed table file and check the loader accepts it
        // and respects the treatment column.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        let mut text = String::from("treatment");
        for i in 1..=25 {
            text.push_str(&format!(",x{i}"));
        }
        text.push('\n');
        let mut rng = crate::seeding::rng(55);
        for i in 0..IHDP_ROWS {
            let t = u8::from(i < 139);
            text.push_str(&format!("{t}"));
            for j in 0..25 {
                if j < N_CONTINUOUS {
                    let v: f64 = rand::Rng::random_range(&mut rng, -3.0..3.0);
                    text.push_str(&format!(",{v:.4}"));
                } else {
                    let v = u8::from(rng.random::<f64>() < 0.5);
                    text.push_str(&format!(",{v}"));
                }
            }
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let (ds, oracle) = generate_ihdp(Some(&path), 2).unwrap();
        assert!(!oracle.surrogate_covariates);
        assert_eq!(ds.treatments().iter().filter(|&&t| t == 1).count(), 139);
        assert_eq!(ds.dim(), 24);
        // Continuous covariates are standardized.
        let covs = ds.covariates();
        for j in 0..N_CONTINUOUS {
            let mean = covs.column(j).sum() / ds.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }
}
