//! L-infinity bounded attacks: FGSM and PGD with optional random start.
//!
//! Each iterate is projected onto the epsilon ball around the clean input and
//! then clamped to the valid feature range, in that order. Input gradients
//! are computed per row (the loss of row `i` only depends on row `i`), so the
//! result for an example never depends on what else is in the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::{input_gradient, MlpParams};
use crate::tensor::Tensor;

/// Rows handed to one worker when attacking a whole dataset.
const ATTACK_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            step_size,
            iterations,
            random_start: true,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    /// Checks the parameter ranges. A zero radius is accepted with any
    /// positive step, since every step is projected away.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size", format!("must be > 0, got {}", self.step_size)));
        }
        if self.epsilon > 0.0 && self.step_size > self.epsilon {
            return Err(Error::config(
                "step_size",
                format!("step {} exceeds epsilon {}", self.step_size, self.epsilon),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.clip_min.partial_cmp(&self.clip_max) != Some(std::cmp::Ordering::Less) {
            return Err(Error::config(
                "clip_min",
                format!("clip range [{}, {}] is empty", self.clip_min, self.clip_max),
            ));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_inputs(params: &MlpParams, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not fit network input {}",
            x.shape(),
            params.input_dim()
        )));
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    Ok(())
}

/// Projects `adv` onto `[x - eps, x + eps]` and then onto `[clip_min, clip_max]`.
fn project(adv: &mut [f64], x: &[f64], cfg: &AttackConfig) {
    for (a, &c) in adv.iter_mut().zip(x) {
        *a = a.clamp(c - cfg.epsilon, c + cfg.epsilon).clamp(cfg.clip_min, cfg.clip_max);
    }
}

/// Single signed-gradient step of size epsilon.
pub fn fgsm(params: &MlpParams, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_inputs(params, x, labels, cfg)?;
    let g = input_gradient(params, x, labels)?;
    let mut adv = x.clone();
    for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
        *a = (*a + cfg.epsilon * sign(gv)).clamp(cfg.clip_min, cfg.clip_max);
    }
    Ok(adv)
}

/// PGD from `start`; `start` must already lie in the feasible set.
fn pgd_iterate(
    params: &MlpParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut adv: Tensor,
) -> Result<Tensor> {
    for _ in 0..cfg.iterations {
        let g = input_gradient(params, &adv, labels)?;
        for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a += cfg.step_size * sign(gv);
        }
        project(adv.data_mut(), x.data(), cfg);
        if !adv.is_finite() {
            return Err(Error::Numeric("PGD iterate became non-finite".into()));
        }
    }
    Ok(adv)
}

fn random_start(adv: &mut [f64], x: &[f64], cfg: &AttackConfig, rng: &mut ChaCha8Rng) {
    for a in adv.iter_mut() {
        let u: f64 = rng.random();
        *a += (2.0 * u - 1.0) * cfg.epsilon;
    }
    project(adv, x, cfg);
}

/// Projected gradient ascent on the cross-entropy inside the epsilon ball.
///
/// With `random_start`, the uniform offsets are drawn row-major from a single
/// stream seeded by `rng_seed`, so a one-row call with seed `s` reproduces the
/// per-example result of [`attack_dataset`].
pub fn pgd(
    params: &MlpParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng_seed: u64,
) -> Result<Tensor> {
    check_inputs(params, x, labels, cfg)?;
    let mut start = x.clone();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        random_start(start.data_mut(), x.data(), cfg, &mut rng);
    }
    pgd_iterate(params, x, labels, cfg, start)
}

/// Replaces every row of `ds` by its PGD adversary; row `i` uses the random
/// start stream `seed ^ i`. Rows are attacked in parallel chunks on the
/// current rayon pool; the output does not depend on the pool size.
pub fn attack_dataset(params: &MlpParams, ds: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::Data("cannot attack an empty dataset".into()));
    }
    check_inputs(params, ds.features(), ds.labels(), cfg)?;
    let x = ds.features();
    let d = x.cols();

    let mut start = x.clone();
    if cfg.random_start {
        start
            .data_mut()
            .par_chunks_mut(d)
            .zip(x.data().par_chunks(d))
            .enumerate()
            .for_each(|(i, (row, clean))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
                random_start(row, clean, cfg, &mut rng);
            });
    }

    let n = ds.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ATTACK_CHUNK)
        .map(|s| (s, (s + ATTACK_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            pgd_iterate(
                params,
                &x.select_rows(&idx),
                &ds.labels()[s..e],
                cfg,
                start.select_rows(&idx),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = Vec::with_capacity(n * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        ds.labels().to_vec(),
        ds.num_classes(),
    )
}
