//! Finite-difference self-test for the analytic gradients.
//!
//! The reference side only calls `forward` and `cross_entropy`, never the
//! backward pass, so a bug in backpropagation cannot hide itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mlp::{backward, cross_entropy, forward, init_params, MlpParams};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn loss_at(params: &MlpParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy(&forward(params, x)?, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_param_error: f64,
    pub max_input_error: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// Compares every parameter and input gradient against central differences.
pub fn check_network(
    params: &MlpParams,
    x: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<GradcheckReport> {
    let analytic = backward(params, x, labels)?;
    let analytic_params: Vec<f64> = analytic
        .layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
        .collect();

    let mut max_param_error: f64 = 0.0;
    let mut probe = params.clone();
    for (k, &a) in analytic_params.iter().enumerate() {
        let orig = params.values().nth(k).expect("index in range");
        *probe.values_mut().nth(k).expect("index in range") = orig + h;
        let up = loss_at(&probe, x, labels)?;
        *probe.values_mut().nth(k).expect("index in range") = orig - h;
        let down = loss_at(&probe, x, labels)?;
        *probe.values_mut().nth(k).expect("index in range") = orig;
        max_param_error = max_param_error.max(relative_error(a, (up - down) / (2.0 * h)));
    }

    let input = analytic.input.expect("backward returns input gradient");
    let mut max_input_error: f64 = 0.0;
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        xp.data_mut()[k] = orig + h;
        let up = loss_at(params, &xp, labels)?;
        xp.data_mut()[k] = orig - h;
        let down = loss_at(params, &xp, labels)?;
        xp.data_mut()[k] = orig;
        max_input_error = max_input_error.max(relative_error(input.data()[k], (up - down) / (2.0 * h)));
    }

    Ok(GradcheckReport {
        checked: analytic_params.len() + x.len(),
        max_param_error,
        max_input_error,
    })
}

/// Architecture and batch for the `index`-th random network of a suite.
///
/// Layer widths are drawn up to `max_sizes` elementwise; the batch has up to
/// `max_rows` rows with features in `[0, 1]`.
pub fn random_case(
    seed: u64,
    index: u64,
    max_sizes: &[usize],
    max_rows: usize,
) -> Result<(MlpParams, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, &[index]));
    let mut sizes: Vec<usize> = max_sizes.iter().map(|&m| rng.random_range(1..=m)).collect();
    let last = sizes.len() - 1;
    sizes[last] = sizes[last].max(2);
    let params = init_params(&sizes, rng.random())?;
    let rows = rng.random_range(1..=max_rows);
    let data = (0..rows * sizes[0]).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::new(vec![rows, sizes[0]], data)?;
    let labels = (0..rows).map(|_| rng.random_range(0..sizes[last])).collect();
    Ok((params, x, labels))
}

/// Runs `networks` random cases and returns the per-case reports.
pub fn run_suite(
    seed: u64,
    networks: usize,
    max_sizes: &[usize],
    max_rows: usize,
) -> Result<Vec<GradcheckReport>> {
    (0..networks as u64)
        .map(|i| {
            let (p, x, y) = random_case(seed, i, max_sizes, max_rows)?;
            check_network(&p, &x, &y, DEFAULT_STEP)
        })
        .collect()
}
