use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Rescale applied after sampling: `x' = CENTER + SCALE * x`, then clamped
/// to `[0, 1]`. Class means have unit norm, so they land near the middle of
/// the unit cube.
const CENTER: f64 = 0.5;
const SCALE: f64 = 0.25;

/// Unit-norm class means. With `dim >= classes` they are orthonormal, i.e. a
/// randomly rotated regular simplex; otherwise normalized Gaussian directions.
fn class_means(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[domain::BLOBS, 0]);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        if means.len() < dim {
            // Gram-Schmidt against the previous means
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        means.push(v);
    }
    means
}

/// Gaussian clusters, `per_class` rows per class, ordered by class.
pub fn make_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::config("classes", "must be positive"));
    }
    if dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    if per_class == 0 {
        return Err(Error::config("per_class", "must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config("spread", format!("must be finite and >= 0, got {spread}")));
    }
    let means = class_means(classes, dim, seed);
    let mut r = rng::stream(seed, &[domain::BLOBS, 1]);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &mv in m {
                let noise: f64 = r.sample(StandardNormal);
                data.push((CENTER + SCALE * (mv + spread * noise)).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}
