//! Experiment configuration: sectioned `key = value` text (TOML), defaults,
//! range validation and command-line style overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::FeatureTransform;
use crate::error::{Error, Result};
use crate::eval::{AdversaryTraining, NamedAttack};
use crate::federation::{participants, FederationConfig, Weighting};
use crate::strategies::StrategyKind;

/// Configuration used when no file is given.
pub const DEFAULT_CONFIG: &str = r#"strategy = "efat"

[dataset]
classes = 10
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub strategy: StrategyKind,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset file written by `partition` or `save_dataset`. When set, the
    /// blob parameters are ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            classes: 10,
            dim: 20,
            per_class: 150,
            spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Held out first, before any other split.
    pub test_fraction: f64,
    /// Held out for the black-box adversary; no client sees it.
    pub adversary_fraction: f64,
    /// Share of the remainder that forms the public set `G`.
    pub public_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            adversary_fraction: 0.2,
            public_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewMode {
    Dirichlet,
    FeatureSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: SkewMode,
    pub gamma: f64,
    /// Client `k` is rotated by `(k - (K-1)/2) * rotation_step` radians.
    pub rotation_step: f64,
    /// Client `k` is shifted by `(k - (K-1)/2) * brightness_step`.
    pub brightness_step: f64,
    pub noise_sigma: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: SkewMode::Dirichlet,
            gamma: 0.05,
            rotation_step: 0.2,
            brightness_step: 0.05,
            noise_sigma: 0.02,
        }
    }
}

impl PartitionConfig {
    pub fn transforms(&self, clients: usize) -> Vec<FeatureTransform> {
        let mid = (clients as f64 - 1.0) / 2.0;
        (0..clients)
            .map(|k| {
                let offset = k as f64 - mid;
                FeatureTransform {
                    rotation: offset * self.rotation_step,
                    brightness: offset * self.brightness_step,
                    noise_sigma: self.noise_sigma,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub exchange_every: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub weighting: Weighting,
    /// Epochs of server-side training on the public set before round 0.
    pub warmup_epochs: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 5,
            participation: 1.0,
            rounds: 30,
            local_epochs: 5,
            exchange_every: 5,
            lr: 0.1,
            batch_size: 32,
            alpha: 0.1,
            weighting: Weighting::BySize,
            warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub eps_train: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub eps_test: Vec<f64>,
    pub eval_step_size: f64,
    pub eval_steps: Vec<usize>,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            eps_train: 0.03,
            step_size: 0.0075,
            steps: 10,
            random_start: true,
            eps_test: vec![0.05],
            eval_step_size: 0.0125,
            eval_steps: vec![10, 20],
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate after every `every` rounds (the last round is always
    /// evaluated).
    pub every: usize,
    pub adversary_hidden: Vec<usize>,
    pub adversary_epochs: usize,
    pub adversary_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 1,
            adversary_hidden: vec![32],
            adversary_epochs: 60,
            adversary_lr: 0.1,
        }
    }
}

fn check(ok: bool, key: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg()))
    }
}

fn fraction(v: f64, key: &str) -> Result<()> {
    check(v > 0.0 && v < 1.0, key, || format!("must lie in (0, 1), got {v}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| {
            Error::config("config", e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical snapshot with every default written out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.path.is_none() {
            check(d.classes >= 2, "dataset.classes", || format!("must be >= 2, got {}", d.classes))?;
            check(d.dim >= 1, "dataset.dim", || "must be >= 1".into())?;
            check(d.per_class >= 1, "dataset.per_class", || "must be >= 1".into())?;
            check(d.spread >= 0.0 && d.spread.is_finite(), "dataset.spread", || {
                format!("must be >= 0, got {}", d.spread)
            })?;
        }
        fraction(self.split.test_fraction, "split.test_fraction")?;
        fraction(self.split.adversary_fraction, "split.adversary_fraction")?;
        fraction(self.split.public_fraction, "split.public_fraction")?;

        let p = &self.partition;
        check(p.gamma > 0.0 && p.gamma.is_finite(), "partition.gamma", || {
            format!("must be > 0, got {}", p.gamma)
        })?;
        check(p.noise_sigma >= 0.0, "partition.noise_sigma", || {
            format!("must be >= 0, got {}", p.noise_sigma)
        })?;
        check(p.rotation_step.is_finite(), "partition.rotation_step", || "must be finite".into())?;
        check(p.brightness_step.is_finite(), "partition.brightness_step", || "must be finite".into())?;

        let f = &self.federation;
        check(f.clients >= 1, "federation.clients", || "must be >= 1".into())?;
        check(f.participation > 0.0 && f.participation <= 1.0, "federation.participation", || {
            format!("must lie in (0, 1], got {}", f.participation)
        })?;
        check(participants(f.clients, f.participation) >= 1, "federation.participation", || {
            format!("selects no client out of {}", f.clients)
        })?;
        check(f.local_epochs >= 1, "federation.local_epochs", || "must be >= 1".into())?;
        check(f.exchange_every >= 1, "federation.exchange_every", || "must be >= 1".into())?;
        check(f.lr > 0.0 && f.lr.is_finite(), "federation.lr", || format!("must be > 0, got {}", f.lr))?;
        check(f.batch_size >= 1, "federation.batch_size", || "must be >= 1".into())?;
        check(f.alpha > 0.0 && f.alpha <= 1.0, "federation.alpha", || {
            format!("must lie in (0, 1], got {}", f.alpha)
        })?;

        check(self.model.hidden.iter().all(|&h| h > 0), "model.hidden", || {
            "hidden widths must be positive".into()
        })?;

        let a = &self.attack;
        check(a.clip_min < a.clip_max, "attack.clip_min", || {
            format!("clip_min {} must be < clip_max {}", a.clip_min, a.clip_max)
        })?;
        check(a.eps_train >= 0.0 && a.eps_train.is_finite(), "attack.eps_train", || {
            format!("must be >= 0, got {}", a.eps_train)
        })?;
        check(a.step_size > 0.0, "attack.step_size", || format!("must be > 0, got {}", a.step_size))?;
        check(a.eps_train == 0.0 || a.step_size <= a.eps_train, "attack.step_size", || {
            format!("{} exceeds eps_train {}", a.step_size, a.eps_train)
        })?;
        check(a.steps >= 1, "attack.steps", || "must be >= 1".into())?;
        check(!a.eps_test.is_empty(), "attack.eps_test", || "needs at least one radius".into())?;
        for &e in &a.eps_test {
            check(e >= 0.0 && e.is_finite(), "attack.eps_test", || format!("must be >= 0, got {e}"))?;
            check(e == 0.0 || a.eval_step_size <= e, "attack.eval_step_size", || {
                format!("{} exceeds eps_test {e}", a.eval_step_size)
            })?;
        }
        check(a.eval_step_size > 0.0, "attack.eval_step_size", || "must be > 0".into())?;
        check(!a.eval_steps.is_empty() && a.eval_steps.iter().all(|&k| k >= 1), "attack.eval_steps", || {
            "needs at least one positive iteration count".into()
        })?;

        let e = &self.eval;
        check(e.every >= 1, "eval.every", || "must be >= 1".into())?;
        check(e.adversary_hidden.iter().all(|&h| h > 0), "eval.adversary_hidden", || {
            "hidden widths must be positive".into()
        })?;
        check(e.adversary_lr > 0.0 && e.adversary_lr.is_finite(), "eval.adversary_lr", || {
            "must be > 0".into()
        })?;
        Ok(())
    }

    pub fn train_attack(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            epsilon: a.eps_train,
            step_size: a.step_size,
            iterations: a.steps,
            random_start: a.random_start,
            clip_min: a.clip_min,
            clip_max: a.clip_max,
        }
    }

    /// Evaluation attacks named `pgd{K}`, or `pgd{K}_eps{e}` when several
    /// radii are configured.
    pub fn eval_attacks(&self) -> Vec<NamedAttack> {
        let a = &self.attack;
        let mut out = Vec::new();
        for &eps in &a.eps_test {
            for &k in &a.eval_steps {
                let name = if a.eps_test.len() == 1 {
                    format!("pgd{k}")
                } else {
                    format!("pgd{k}_eps{eps}")
                };
                out.push(NamedAttack {
                    name,
                    config: AttackConfig {
                        epsilon: eps,
                        step_size: a.eval_step_size,
                        iterations: k,
                        random_start: a.random_start,
                        clip_min: a.clip_min,
                        clip_max: a.clip_max,
                    },
                });
            }
        }
        out
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            num_clients: f.clients,
            participation: f.participation,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            exchange_every: f.exchange_every,
            lr: f.lr,
            batch_size: f.batch_size,
            alpha: f.alpha,
            strategy: self.strategy,
            attack: self.train_attack(),
            weighting: f.weighting,
        }
    }

    pub fn adversary_training(&self) -> AdversaryTraining {
        AdversaryTraining {
            hidden: self.eval.adversary_hidden.clone(),
            epochs: self.eval.adversary_epochs,
            lr: self.eval.adversary_lr,
            batch_size: self.federation.batch_size,
        }
    }
}

/// Sets a dotted key such as `partition.gamma` in a parsed config table.
/// The value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

/// Parses `key=value` into its two halves.
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config(s, "expected key=value"))
}
