//! Experiment configuration.
//!
//! One TOML document with flat sections. Every field has a default, so an
//! empty file is a valid config; [`ExperimentConfig::to_toml`] prints the
//! full document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of categorical fields on each item (id, category) and user
/// (id, segment).
pub const ITEM_FIELDS: usize = 2;
pub const USER_FIELDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every component derives its own stream from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub reasoning: ReasoningConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Categories/segments are the sign pattern of the first
    /// `category_bits` latent coordinates, giving `2^bits` values.
    pub category_bits: usize,
    pub click: ClickModel,
}

/// Click logit = `affinity·⟨u,i⟩ + position·1/log2(k+1) − redundancy·max cos + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickModel {
    pub affinity: f64,
    pub position: f64,
    pub redundancy: f64,
    pub bias: f64,
    /// List utility bonus per distinct category in the list.
    pub diversity_bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Target list length `K`.
    pub list_len: usize,
    /// Candidate pool size `M`.
    pub pool_size: usize,
    /// Logged interaction lists to generate.
    pub n_lists: usize,
    /// Fraction of logged lists held out for evaluation.
    pub test_fraction: f64,
    /// Training candidate pools for the generator.
    pub n_pools: usize,
    /// Held-out candidate pools.
    pub n_test_pools: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width per categorical field.
    pub embed_dim: usize,
    /// Model width; must equal `embed_dim · (item fields + user fields)`.
    pub hidden: usize,
    pub heads: usize,
    pub eval_layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Position-discounted sum of predicted item feedback.
    Dcg,
    /// The list-level head output.
    Listwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasoningConfig {
    /// Base temperature `τ₀`.
    pub tau0: f64,
    /// Exploration amplification factor `α ≥ 1`.
    pub alpha: f64,
    /// Entropy threshold above which a reasoning token is inserted.
    pub entropy_threshold: f64,
    /// Maximum consecutive reasoning tokens before a selection.
    pub max_reasoning_steps: usize,
    /// Rollouts per group `G`.
    pub group_size: usize,
    pub reward: RewardMode,
    pub kv_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub eval_epochs: usize,
    pub grpo_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            world: WorldConfig::default(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            reasoning: ReasoningConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 2000,
            latent_dim: 4,
            category_bits: 3,
            click: ClickModel::default(),
        }
    }
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            affinity: 1.0,
            position: 0.5,
            redundancy: 0.8,
            bias: -1.0,
            diversity_bonus: 0.5,
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            list_len: 10,
            pool_size: 20,
            n_lists: 4000,
            test_fraction: 0.2,
            n_pools: 1000,
            n_test_pools: 200,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 64,
            heads: 8,
            eval_layers: 2,
        }
    }
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            tau0: 0.6,
            alpha: 2.0,
            entropy_threshold: 0.5,
            max_reasoning_steps: 1,
            group_size: 4,
            reward: RewardMode::Dcg,
            kv_cache: true,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            eval_epochs: 10,
            grpo_iterations: 2000,
        }
    }
}

impl ModelConfig {
    pub fn d_item(&self) -> usize {
        self.embed_dim * ITEM_FIELDS
    }

    pub fn d_user(&self) -> usize {
        self.embed_dim * USER_FIELDS
    }

    pub fn width(&self) -> usize {
        self.d_item() + self.d_user()
    }
}

impl WorldConfig {
    pub fn n_categories(&self) -> usize {
        1 << self.category_bits
    }

    pub fn item_vocab(&self) -> [usize; ITEM_FIELDS] {
        [self.items, self.n_categories()]
    }

    pub fn user_vocab(&self) -> [usize; USER_FIELDS] {
        [self.users, self.n_categories()]
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, t, m, r, o) = (&self.world, &self.task, &self.model, &self.reasoning, &self.optim);
        check(w.users > 0 && w.items > 0, || "users and items must be positive".into())?;
        check(w.latent_dim > 0, || "latent_dim must be positive".into())?;
        check(w.category_bits >= 1 && w.category_bits <= w.latent_dim.min(16), || {
            format!("category_bits must be in 1..={}", w.latent_dim.min(16))
        })?;
        check(t.list_len >= 1, || "list_len (K) must be at least 1".into())?;
        check(t.list_len <= t.pool_size, || {
            format!("list_len K={} exceeds pool_size M={}", t.list_len, t.pool_size)
        })?;
        check(t.pool_size <= w.items, || {
            format!("pool_size M={} exceeds item count {}", t.pool_size, w.items)
        })?;
        check((0.0..1.0).contains(&t.test_fraction), || "test_fraction must be in [0, 1)".into())?;
        check(m.embed_dim > 0 && m.embed_dim % 2 == 0, || "embed_dim must be positive and even".into())?;
        check(m.hidden == m.width(), || {
            format!(
                "hidden={} must equal embed_dim·{} = {}",
                m.hidden,
                ITEM_FIELDS + USER_FIELDS,
                m.width()
            )
        })?;
        check(m.heads > 0 && m.hidden % m.heads == 0, || {
            format!("hidden={} not divisible by heads={}", m.hidden, m.heads)
        })?;
        check(m.eval_layers >= 1, || "eval_layers must be at least 1".into())?;
        check(r.tau0 > 0.0 && r.tau0.is_finite(), || format!("tau0 must be positive, got {}", r.tau0))?;
        check(r.alpha >= 1.0 && r.alpha.is_finite(), || format!("alpha must be >= 1, got {}", r.alpha))?;
        check(r.entropy_threshold >= 0.0, || "entropy_threshold must be >= 0".into())?;
        check(r.group_size >= 1, || "group_size (G) must be at least 1".into())?;
        check(o.lr > 0.0 && o.eps > 0.0, || "lr and eps must be positive".into())?;
        check((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), || {
            "beta1 and beta2 must be in [0, 1)".into()
        })?;
        check(o.batch_size >= 1, || "batch_size must be at least 1".into())?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }
}

/// A tiny architecture for fast unit tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.world.users = 4;
    c.world.items = 12;
    c.world.latent_dim = 2;
    c.world.category_bits = 1;
    c.task.list_len = 3;
    c.task.pool_size = 5;
    c.model.embed_dim = 2;
    c.model.hidden = 8;
    c.model.heads = 2;
    c.optim.batch_size = 8;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model.width(), 64);
        assert_eq!(c.reasoning.tau0, 0.6);
        assert_eq!(c.reasoning.alpha, 2.0);
        assert_eq!(c.reasoning.max_reasoning_steps, 1);
        assert_eq!(c.reasoning.entropy_threshold, 0.5);
        assert_eq!(c.reasoning.group_size, 4);
        assert_eq!(c.optim.lr, 5e-4);
        assert_eq!(c.optim.batch_size, 128);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.reasoning.tau0 = 0.3;
        c.reasoning.reward = RewardMode::Listwise;
        c.world.click.bias = -1.25;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            "[task]\nlist_len = 30\npool_size = 20",
            "[reasoning]\nalpha = 0.5",
            "[reasoning]\ntau0 = 0.0",
            "[reasoning]\nentropy_threshold = -1.0",
            "[reasoning]\ngroup_size = 0",
            "[model]\nheads = 7",
            "[model]\nhidden = 32",
            "bogus = 1",
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
