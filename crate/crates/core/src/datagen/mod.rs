//! Seeded benchmark generators with ground-truth oracles.
//!
//! Three generators: a one-dimensional structural causal model with a
//! binary hidden confounder at a chosen level `gamma_star`; an MNIST
//! variant that embeds the same model behind a per-digit latent feature
//! computed from image brightness; and the infant-health semi-synthetic
//! benchmark with one covariate hidden to induce confounding.
//!
//! Every generator stores the potential outcomes and the per-row true
//! CATE alongside the observed data so policies can be scored against
//! ground truth. All randomness is derived per row from one seed, so
//! generation order cannot change values.

mod idx;
mod ihdp;
mod mnist;
mod simulated;

pub use idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use ihdp::{generate_ihdp, IhdpOracle, IHDP_BINARY_FREQUENCIES, IHDP_ROWS};
pub use mnist::{generate_mnist, MnistFiles};
pub use simulated::{generate_simulated, ConfoundedScm};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::seeding::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX data in {path} at byte offset {offset}: {detail}")]
    IdxFormat { path: String, offset: u64, detail: String },
    #[error("covariate table is missing columns: {missing:?}")]
    MalformedTable { missing: Vec<String> },
    #[error("covariate table: {0}")]
    BadTable(String),
    #[error("split fractions must be non-negative and sum to 1")]
    BadFractions,
    #[error("split `{0}` has a positive fraction but no rows")]
    EmptySplit(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dataset invariant violated: {0}")]
    Inconsistent(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Valid,
    Test,
}

/// Observational data plus (for synthetic sources) ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationalDataset {
    covariates: Array2<f64>,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
    hidden_confounder: Option<Vec<u8>>,
    /// Per-row `[y0, y1]`; present only for synthetic data.
    potential_outcomes: Option<Array2<f64>>,
    /// Per-row noiseless true CATE; present only for synthetic data.
    oracle_cate: Option<Vec<f64>>,
    /// One-dimensional latent behind high-dimensional covariates, when
    /// the generator has one.
    latent: Option<Vec<f64>>,
    split: SplitTag,
    seed: u64,
}

impl ObservationalDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        covariates: Array2<f64>,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
        hidden_confounder: Option<Vec<u8>>,
        potential_outcomes: Option<Array2<f64>>,
        oracle_cate: Option<Vec<f64>>,
        latent: Option<Vec<f64>>,
        split: SplitTag,
        seed: u64,
    ) -> Result<Self, DataError> {
        let n = covariates.nrows();
        if treatments.len() != n || outcomes.len() != n {
            return Err(DataError::Inconsistent("row counts differ"));
        }
        if treatments.iter().any(|&t| t > 1) {
            return Err(DataError::Inconsistent("treatments must be 0 or 1"));
        }
        if let Some(u) = &hidden_confounder {
            if u.len() != n || u.iter().any(|&v| v > 1) {
                return Err(DataError::Inconsistent("hidden confounder malformed"));
            }
        }
        if let Some(po) = &potential_outcomes {
            if po.nrows() != n || po.ncols() != 2 {
                return Err(DataError::Inconsistent("potential outcomes must be n x 2"));
            }
            for i in 0..n {
                let expected = po[[i, treatments[i] as usize]];
                if outcomes[i] != expected {
                    return Err(DataError::Inconsistent(
                        "observed outcome differs from assigned-arm potential outcome",
                    ));
                }
            }
        }
        if let Some(c) = &oracle_cate {
            if c.len() != n {
                return Err(DataError::Inconsistent("oracle cate length differs"));
            }
        }
        if let Some(l) = &latent {
            if l.len() != n {
                return Err(DataError::Inconsistent("latent length differs"));
            }
        }
        Ok(ObservationalDataset {
            covariates,
            treatments,
            outcomes,
            hidden_confounder,
            potential_outcomes,
            oracle_cate,
            latent,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn hidden_confounder(&self) -> Option<&[u8]> {
        self.hidden_confounder.as_deref()
    }

    pub fn potential_outcomes(&self) -> Option<ArrayView2<'_, f64>> {
        self.potential_outcomes.as_ref().map(|p| p.view())
    }

    pub fn oracle_cate(&self) -> Option<&[f64]> {
        self.oracle_cate.as_deref()
    }

    pub fn latent(&self) -> Option<&[f64]> {
        self.latent.as_deref()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn take_rows(&self, rows: &[usize], split: SplitTag) -> Self {
        let gather2 = |m: &Array2<f64>| crate::mdn::gather_rows(m.view(), rows);
        ObservationalDataset {
            covariates: gather2(&self.covariates),
            treatments: rows.iter().map(|&r| self.treatments[r]).collect(),
            outcomes: rows.iter().map(|&r| self.outcomes[r]).collect(),
            hidden_confounder: self
                .hidden_confounder
                .as_ref()
                .map(|u| rows.iter().map(|&r| u[r]).collect()),
            potential_outcomes: self.potential_outcomes.as_ref().map(gather2),
            oracle_cate: self
                .oracle_cate
                .as_ref()
                .map(|c| rows.iter().map(|&r| c[r]).collect()),
            latent: self.latent.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            split,
            seed: self.seed,
        }
    }
}

/// Disjoint, exhaustive, seed-reproducible partition. Validation and
/// test sizes are floored; the remainder goes to train.
pub fn split(
    dataset: &ObservationalDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ObservationalDataset, ObservationalDataset, ObservationalDataset), DataError> {
    let (f_train, f_valid, f_test) = fractions;
    if f_train < 0.0 || f_valid < 0.0 || f_test < 0.0 {
        return Err(DataError::BadFractions);
    }
    if (f_train + f_valid + f_test - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions);
    }
    let n = dataset.len();
    let n_valid = (n as f64 * f_valid).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    let n_train = n - n_valid - n_test;
    if f_train > 0.0 && n_train == 0 {
        return Err(DataError::EmptySplit("train"));
    }
    if f_valid > 0.0 && n_valid == 0 {
        return Err(DataError::EmptySplit("valid"));
    }
    if f_test > 0.0 && n_test == 0 {
        return Err(DataError::EmptySplit("test"));
    }
    split_counts(dataset, (n_train, n_valid, n_test), seed)
}

/// Partition by exact row counts (must sum to the dataset size).
pub fn split_counts(
    dataset: &ObservationalDataset,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<(ObservationalDataset, ObservationalDataset, ObservationalDataset), DataError> {
    let (n_train, n_valid, n_test) = counts;
    let n = dataset.len();
    if n_train + n_valid + n_test != n {
        return Err(DataError::BadFractions);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(seeding::derive(seed, Stream::Split, 0));
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let train = dataset.take_rows(&order[..n_train], SplitTag::Train);
    let valid = dataset.take_rows(&order[n_train..n_train + n_valid], SplitTag::Valid);
    let test = dataset.take_rows(&order[n_train + n_valid..], SplitTag::Test);
    Ok((train, valid, test))
}

/// Metadata written next to every exported dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub generator: String,
    pub generator_version: String,
    pub seed: u64,
    pub gamma_star: Option<f64>,
    pub rows: usize,
    pub covariate_dim: usize,
    pub split: SplitTag,
    pub surrogate_covariates: bool,
}

/// Write the dataset as CSV (header + one row per unit) and a JSON
/// sidecar with seed, confounding level, and generator version.
pub fn export_csv(
    dataset: &ObservationalDataset,
    sidecar: &DatasetSidecar,
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| DataError::Io { path: p.clone(), source }
    };
    let mut w = csv::Writer::from_writer(
        std::fs::File::create(csv_path).map_err(io_err(csv_path))?,
    );
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("y".into());
    if dataset.hidden_confounder().is_some() {
        header.push("u".into());
    }
    if dataset.potential_outcomes().is_some() {
        header.push("y0".into());
        header.push("y1".into());
    }
    if dataset.oracle_cate().is_some() {
        header.push("true_cate".into());
    }
    w.write_record(&header).map_err(|e| DataError::Io {
        path: csv_path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset
            .covariates()
            .row(i)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        rec.push(format!("{}", dataset.treatments()[i]));
        rec.push(format!("{}", dataset.outcomes()[i]));
        if let Some(u) = dataset.hidden_confounder() {
            rec.push(format!("{}", u[i]));
        }
        if let Some(po) = dataset.potential_outcomes() {
            rec.push(format!("{}", po[[i, 0]]));
            rec.push(format!("{}", po[[i, 1]]));
        }
        if let Some(c) = dataset.oracle_cate() {
            rec.push(format!("{}", c[i]));
        }
        w.write_record(&rec).map_err(|e| DataError::Io {
            path: csv_path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_err(csv_path))?;

    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    let mut f = std::fs::File::create(sidecar_path).map_err(io_err(sidecar_path))?;
    f.write_all(json.as_bytes()).map_err(io_err(sidecar_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> ObservationalDataset {
        let covariates = Array2::from_shape_fn((n, 2), |(i, j)| i as f64 + j as f64 * 0.1);
        let treatments: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let po = Array2::from_shape_fn((n, 2), |(i, j)| i as f64 * 10.0 + j as f64);
        let outcomes: Vec<f64> =
            (0..n).map(|i| po[[i, (i % 2) as usize]]).collect();
        ObservationalDataset::new(
            covariates,
            treatments,
            outcomes,
            None,
            Some(po),
            None,
            None,
            SplitTag::Full,
            7,
        )
        .unwrap()
    }

    #[test]
    fn observed_outcome_must_match_assigned_arm() {
        let covariates = Array2::zeros((2, 1));
        let po = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f64);
        let bad = ObservationalDataset::new(
            covariates,
            vec![0, 1],
            vec![0.0, 0.0],
            None,
            Some(po),
            None,
            None,
            SplitTag::Full,
            0,
        );
        assert!(matches!(bad, Err(DataError::Inconsistent(_))));
    }

    #[test]
    fn full_train_fraction_returns_input() {
        let ds = toy_dataset(10);
        let (train, valid, test) = split(&ds, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(valid.len(), 0);
        assert_eq!(test.len(), 0);
        let mut outcomes = train.outcomes().to_vec();
        outcomes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = ds.outcomes().to_vec();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(outcomes, expected);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let ds = toy_dataset(1000);
        let (train, valid, test) = split(&ds, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((train.len(), valid.len(), test.len()), (800, 100, 100));
    }

    #[test]
    fn split_is_reproducible_disjoint_exhaustive() {
        let ds = toy_dataset(53);
        let (a1, b1, c1) = split(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        let (a2, _, _) = split(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(a1.outcomes(), a2.outcomes());
        let mut all: Vec<f64> = a1
            .outcomes()
            .iter()
            .chain(b1.outcomes())
            .chain(c1.outcomes())
            .copied()
            .collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut expected = ds.outcomes().to_vec();
        expected.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, expected);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let ds = toy_dataset(10);
        assert!(matches!(split(&ds, (0.5, 0.2, 0.2), 0), Err(DataError::BadFractions)));
        // Positive fraction that floors to zero rows.
        let tiny = toy_dataset(3);
        assert!(matches!(
            split(&tiny, (0.7, 0.2, 0.1), 0),
            Err(DataError::EmptySplit(_))
        ));
    }

    #[test]
    fn export_writes_header_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(4);
        let sidecar = DatasetSidecar {
            generator: "simulated".into(),
            generator_version: env!("CARGO_PKG_VERSION").into(),
            seed: 7,
            gamma_star: Some(1.0),
            rows: 4,
            covariate_dim: 2,
            split: SplitTag::Full,
            surrogate_covariates: false,
        };
        let csv_path = dir.path().join("data.csv");
        let json_path = dir.path().join("data.json");
        export_csv(&ds, &sidecar, &csv_path, &json_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "x0,x1,t,y,y0,y1");
        assert_eq!(text.lines().count(), 5);
        let meta: DatasetSidecar =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(meta.seed, 7);
        assert_eq!(meta.gamma_star, Some(1.0));
    }
}
