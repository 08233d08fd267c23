//! MNIST-backed confounded benchmark.
//!
//! Each image receives a latent feature `phi` in `[-2, 2]`: the image's
//! mean intensity is standardized within its digit class, clipped to
//! `[-2, 2]`, and mapped affinely into the digit's own subinterval
//! `[min_c, max_c]` with `min_c = -2 + 0.4 c`. Treatments and outcomes
//! then follow the one-dimensional confounded model with `phi` in place
//! of `x`; the released covariates are the raw pixels scaled to `[0, 1]`.

use ndarray::Array2;
use std::path::{Path, PathBuf};

use super::simulated::ConfoundedScm;
use super::{read_idx_images, read_idx_labels, DataError, ObservationalDataset, SplitTag};
use crate::seeding::{self, Stream};

/// Locations of an IDX image/label pair.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

impl MnistFiles {
    /// Standard file names under a directory.
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            images: dir.join("train-images-idx3-ubyte"),
            labels: dir.join("train-labels-idx1-ubyte"),
        }
    }
}

/// Latent interval assigned to a digit class.
pub fn class_interval(class: u8) -> (f64, f64) {
    let min_c = -2.0 + 0.4 * class as f64;
    (min_c, min_c + 0.4)
}

/// Mean pixel intensity on the `[0, 1]` scale.
fn mean_intensity(pixels: &[u8]) -> f64 {
    pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / pixels.len() as f64
}

/// Latent feature for one image given its class statistics.
fn phi_for(intensity: f64, class: u8, class_mean: f64, class_sd: f64) -> f64 {
    let standardized = if class_sd > 1e-12 { (intensity - class_mean) / class_sd } else { 0.0 };
    let clipped = standardized.clamp(-2.0, 2.0);
    let (min_c, max_c) = class_interval(class);
    min_c + (clipped + 2.0) * (max_c - min_c) / 4.0
}

/// Generate a confounded dataset over `n` images drawn (seeded) from the
/// given IDX pair. Class intensity statistics are computed over all
/// images in the pair.
pub fn generate_mnist(
    files: &MnistFiles,
    n: usize,
    gamma_star: f64,
    seed: u64,
) -> Result<(ObservationalDataset, ConfoundedScm), DataError> {
    let images = read_idx_images(&files.images)?;
    let labels = read_idx_labels(&files.labels)?;
    if images.pixels.len() != labels.len() {
        return Err(DataError::InvalidParam(format!(
            "{} images but {} labels",
            images.pixels.len(),
            labels.len()
        )));
    }
    if n == 0 || n > images.pixels.len() {
        return Err(DataError::InvalidParam(format!(
            "n = {n} outside [1, {}]",
            images.pixels.len()
        )));
    }
    if labels.iter().any(|&c| c > 9) {
        return Err(DataError::InvalidParam("labels must be digits 0..=9".into()));
    }
    let scm = ConfoundedScm::new(gamma_star)?;

    // Per-class mean/sd of mean intensity.
    let intensities: Vec<f64> = images.pixels.iter().map(|p| mean_intensity(p)).collect();
    let mut sums = [0.0f64; 10];
    let mut sqs = [0.0f64; 10];
    let mut counts = [0usize; 10];
    for (&c, &v) in labels.iter().zip(&intensities) {
        sums[c as usize] += v;
        sqs[c as usize] += v * v;
        counts[c as usize] += 1;
    }
    let mut class_mean = [0.0f64; 10];
    let mut class_sd = [0.0f64; 10];
    for c in 0..10 {
        if counts[c] > 0 {
            class_mean[c] = sums[c] / counts[c] as f64;
            class_sd[c] = (sqs[c] / counts[c] as f64 - class_mean[c] * class_mean[c]).max(0.0).sqrt();
        }
    }

    // Seeded subsample of n images.
    let total = images.pixels.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = seeding::rng(seeding::derive(seed, Stream::DataGen, u64::MAX));
    for i in (1..total).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    order.truncate(n);

    let d = images.rows * images.cols;
    let mut covariates = Array2::zeros((n, d));
    let mut treatments = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    let mut confounders = Vec::with_capacity(n);
    let mut potentials = Array2::zeros((n, 2));
    let mut cates = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);

    for (row, &img_idx) in order.iter().enumerate() {
        let class = labels[img_idx] as usize;
        let phi = phi_for(intensities[img_idx], labels[img_idx], class_mean[class], class_sd[class]);
        for (j, &p) in images.pixels[img_idx].iter().enumerate() {
            covariates[[row, j]] = p as f64 / 255.0;
        }
        let mut row_rng = seeding::rng(seeding::derive(seed, Stream::DataGen, row as u64));
        let (u, t, y0, y1) = scm.sample_unit_at(phi, &mut row_rng);
        treatments.push(t);
        confounders.push(u);
        potentials[[row, 0]] = y0;
        potentials[[row, 1]] = y1;
        outcomes.push(if t == 1 { y1 } else { y0 });
        cates.push(scm.true_cate(phi));
        latents.push(phi);
    }

    let dataset = ObservationalDataset::new(
        covariates,
        treatments,
        outcomes,
        Some(confounders),
        Some(potentials),
        Some(cates),
        Some(latents),
        SplitTag::Full,
        seed,
    )?;
    Ok((dataset, scm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{write_idx_images, write_idx_labels, IdxImages};

    /// Synthetic digit-like image set: per class, brightness varies over
    /// a class-specific band so phi spans its interval.
    pub(crate) fn synthetic_mnist(dir: &Path, per_class: usize, side: usize) -> MnistFiles {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::seeding::rng(424_242);
        for class in 0u8..10 {
            for _ in 0..per_class {
                let base = 40.0 + 15.0 * class as f64;
                let jitter: f64 = rand::Rng::random_range(&mut rng, -30.0..30.0);
                let level = (base + jitter).clamp(0.0, 255.0) as u8;
                let img: Vec<u8> = (0..side * side)
                    .map(|k| {
                        let texture = ((k * 7 + class as usize * 13) % 23) as i32 - 11;
                        (level as i32 + texture).clamp(0, 255) as u8
                    })
                    .collect();
                pixels.push(img);
                labels.push(class);
            }
        }
        let files = MnistFiles {
            images: dir.join("train-images-idx3-ubyte"),
            labels: dir.join("train-labels-idx1-ubyte"),
        };
        write_idx_images(&files.images, &IdxImages { pixels, rows: side, cols: side }).unwrap();
        write_idx_labels(&files.labels, &labels).unwrap();
        files
    }

    #[test]
    fn class_intervals_match_grid() {
        assert_eq!(class_interval(0), (-2.0, -1.6));
        assert_eq!(class_interval(9), (1.6, 2.0));
    }

    #[test]
    fn phi_lands_in_class_interval() {
        let dir = tempfile::tempdir().unwrap();
        let files = synthetic_mnist(dir.path(), 60, 6);
        let (ds, _) = generate_mnist(&files, 500, 1.0f64.exp(), 3).unwrap();
        let labels = read_idx_labels(&files.labels).unwrap();
        let images = read_idx_images(&files.images).unwrap();
        let _ = (labels, images);
        let latents = ds.latent().unwrap();
        for &phi in latents {
            assert!((-2.0..=2.0).contains(&phi), "phi {phi} out of range");
        }
        // Spread: phi values are not all identical within the sample.
        let min = latents.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = latents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max - min > 1.0, "latents span {min}..{max}");
    }

    #[test]
    fn clipped_intensity_maps_to_interval_edge() {
        // An image far below its class mean clips at -2 and must land
        // exactly on min_c.
        let phi = phi_for(0.0, 4, 0.9, 0.05);
        let (min_c, _) = class_interval(4);
        assert_eq!(phi, min_c);
        let phi = phi_for(1.0, 4, 0.1, 0.05);
        let (_, max_c) = class_interval(4);
        assert_eq!(phi, max_c);
    }

    #[test]
    fn digit_classes_occupy_their_bands() {
        let dir = tempfile::tempdir().unwrap();
        let files = synthetic_mnist(dir.path(), 40, 5);
        let (ds, _) = generate_mnist(&files, 400, 1.0, 9).unwrap();
        // Recover each row's class from its latent band and check the
        // bands partition [-2, 2].
        for &phi in ds.latent().unwrap() {
            let class = (((phi + 2.0) / 0.4).floor() as i32).clamp(0, 9) as u8;
            let (lo, hi) = class_interval(class);
            assert!(phi >= lo - 1e-12 && phi <= hi + 1e-12);
        }
    }

    #[test]
    fn subsample_is_seeded_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let files = synthetic_mnist(dir.path(), 20, 4);
        let (a, _) = generate_mnist(&files, 100, 2.0, 7).unwrap();
        let (b, _) = generate_mnist(&files, 100, 2.0, 7).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        assert!(generate_mnist(&files, 1000, 2.0, 7).is_err());
    }

    #[test]
    fn missing_file_reports_io_error() {
        let files = MnistFiles {
            images: PathBuf::from("/nonexistent/images"),
            labels: PathBuf::from("/nonexistent/labels"),
        };
        assert!(matches!(generate_mnist(&files, 10, 1.0, 0), Err(DataError::Io { .. })));
    }
}
