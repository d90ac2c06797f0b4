//! Synthetic recommendation environment.
//!
//! Users and items carry hidden latent vectors that drive a click model with
//! affinity, position and redundancy effects. Models only ever see the
//! categorical feature ids.

mod io;

pub use io::{read_interactions, read_pools, read_world, write_jsonl, write_world};

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ClickModel, ExperimentConfig, WorldConfig};
use crate::error::{arg_err, Error, Result};
use crate::rng::{child_rng, child_seed, rng_from_seed, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: usize,
    /// `[user id, segment]`.
    pub feature_ids: Vec<usize>,
    /// Simulator-only preference vector.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    /// `[item id, category]`.
    pub feature_ids: Vec<usize>,
    /// Simulator-only content vector.
    pub latent: Vec<f64>,
}

impl Item {
    pub fn category(&self) -> usize {
        self.feature_ids[1]
    }
}

/// Users and items with ids `0..n`, so ids double as indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub users: Vec<UserProfile>,
    pub items: Vec<Item>,
    pub user_vocab: Vec<usize>,
    pub item_vocab: Vec<usize>,
}

/// One logged list with its feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub items: Vec<usize>,
    pub y_point: Vec<u8>,
    pub y_list: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoolRecord {
    pub user_id: usize,
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub interactions: Vec<InteractionRecord>,
    pub pools: Vec<CandidatePoolRecord>,
}

pub(crate) fn all_distinct(ids: &[usize]) -> bool {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().all(|id| seen.insert(*id))
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return arg_err("interaction has no items");
        }
        if self.items.len() != self.y_point.len() {
            return arg_err(format!(
                "|items| = {} but |y_point| = {}",
                self.items.len(),
                self.y_point.len()
            ));
        }
        if !all_distinct(&self.items) {
            return arg_err("interaction items are not distinct");
        }
        if self.y_point.iter().any(|&y| y > 1) {
            return arg_err("y_point labels must be 0 or 1");
        }
        if !(self.y_list >= 0.0) || !self.y_list.is_finite() {
            return arg_err(format!("y_list must be finite and >= 0, got {}", self.y_list));
        }
        Ok(())
    }
}

impl CandidatePoolRecord {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return arg_err("candidate pool is empty");
        }
        if !all_distinct(&self.candidates) {
            return arg_err("candidate pool has duplicate items");
        }
        Ok(())
    }
}

fn sign_pattern(latent: &[f64], bits: usize) -> usize {
    latent
        .iter()
        .take(bits)
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(b, _)| 1 << b)
        .sum()
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws users and items. Latent coordinates are i.i.d. standard normal;
/// the segment/category field is the sign pattern of the first
/// `category_bits` coordinates, so it is uniform over `2^bits` values and
/// informative about the latent vector.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    if config.users == 0 || config.items == 0 || config.latent_dim == 0 {
        return arg_err("world needs positive user, item and latent counts");
    }
    if config.category_bits == 0 || config.category_bits > config.latent_dim {
        return arg_err("category_bits must be in 1..=latent_dim");
    }
    let bits = config.category_bits;
    let mut urng = child_rng(seed, 0);
    let users = (0..config.users)
        .map(|user_id| {
            let latent = normal_vec(&mut urng, config.latent_dim);
            UserProfile {
                user_id,
                feature_ids: vec![user_id, sign_pattern(&latent, bits)],
                latent,
            }
        })
        .collect();
    let mut irng = child_rng(seed, 1);
    let items = (0..config.items)
        .map(|item_id| {
            let latent = normal_vec(&mut irng, config.latent_dim);
            Item {
                item_id,
                feature_ids: vec![item_id, sign_pattern(&latent, bits)],
                latent,
            }
        })
        .collect();
    Ok(World {
        users,
        items,
        user_vocab: config.user_vocab().to_vec(),
        item_vocab: config.item_vocab().to_vec(),
    })
}

impl World {
    pub fn user(&self, id: usize) -> Result<&UserProfile> {
        self.users.get(id).ok_or(Error::Vocabulary {
            field: "user_id".into(),
            id,
            size: self.users.len(),
        })
    }

    pub fn item(&self, id: usize) -> Result<&Item> {
        self.items.get(id).ok_or(Error::Vocabulary {
            field: "item_id".into(),
            id,
            size: self.items.len(),
        })
    }

    pub fn items_of(&self, ids: &[usize]) -> Result<Vec<&Item>> {
        ids.iter().map(|&id| self.item(id)).collect()
    }

    pub fn n_categories(&self) -> usize {
        self.item_vocab[1]
    }
}

fn affinity(user: &UserProfile, item: &Item) -> f64 {
    user.latent.iter().zip(&item.latent).map(|(a, b)| a * b).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `1 / log2(k + 1)` for 1-based position `k`.
pub fn position_discount(k: usize) -> f64 {
    1.0 / ((k + 1) as f64).log2()
}

/// Ground-truth click probability of every position of `list`.
pub fn click_probabilities(click: &ClickModel, user: &UserProfile, list: &[&Item]) -> Result<Vec<f64>> {
    let ids: Vec<usize> = list.iter().map(|i| i.item_id).collect();
    if !all_distinct(&ids) {
        return arg_err("list contains duplicate items");
    }
    Ok(list
        .iter()
        .enumerate()
        .map(|(k, item)| {
            let redundancy = list[..k]
                .iter()
                .map(|prev| cosine(&item.latent, &prev.latent))
                .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
                .unwrap_or(0.0);
            let logit = click.affinity * affinity(user, item) + click.position * position_discount(k + 1)
                - click.redundancy * redundancy
                + click.bias;
            crate::nn::sigmoid(logit)
        })
        .collect())
}

/// Samples per-item clicks and the list utility
/// `Σ clicks + diversity_bonus · (distinct categories)`.
pub fn simulate_feedback(
    click: &ClickModel,
    user: &UserProfile,
    list: &[&Item],
    seed: u64,
) -> Result<(Vec<u8>, f64)> {
    let probs = click_probabilities(click, user, list)?;
    let mut rng = rng_from_seed(seed);
    let y_point: Vec<u8> = probs.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let categories: HashSet<usize> = list.iter().map(|i| i.category()).collect();
    let clicks: f64 = y_point.iter().map(|&y| f64::from(y)).sum();
    Ok((y_point, clicks + click.diversity_bonus.max(0.0) * categories.len() as f64))
}

fn sample_pool<R: Rng>(rng: &mut R, world: &World, pool_size: usize) -> CandidatePoolRecord {
    let user_id = rng.random_range(0..world.users.len());
    let candidates = index::sample(rng, world.items.len(), pool_size).into_vec();
    CandidatePoolRecord { user_id, candidates }
}

/// Random candidate pools (user drawn uniformly, items without replacement).
pub fn sample_pools(world: &World, n_pools: usize, pool_size: usize, seed: u64) -> Result<Vec<CandidatePoolRecord>> {
    if pool_size == 0 || pool_size > world.items.len() {
        return arg_err(format!(
            "pool size {pool_size} must be in 1..={}",
            world.items.len()
        ));
    }
    Ok((0..n_pools)
        .map(|j| sample_pool(&mut child_rng(seed, j as u64), world, pool_size))
        .collect())
}

/// Logged lists: for each sampled pool, the top-`K` items by true affinity
/// (ties to the lower id), with feedback drawn from the click model.
pub fn build_dataset(
    world: &World,
    click: &ClickModel,
    n_lists: usize,
    list_len: usize,
    pool_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if list_len == 0 || list_len > pool_size {
        return arg_err(format!("need 1 <= K <= M, got K={list_len}, M={pool_size}"));
    }
    if pool_size > world.items.len() {
        return arg_err(format!(
            "pool size M={pool_size} exceeds item count {}",
            world.items.len()
        ));
    }
    let mut out = Dataset::default();
    for j in 0..n_lists as u64 {
        let mut rng = child_rng(seed, j);
        let pool = sample_pool(&mut rng, world, pool_size);
        let user = world.user(pool.user_id)?;
        let mut ranked: Vec<(f64, usize)> = pool
            .candidates
            .iter()
            .map(|&id| (affinity(user, &world.items[id]), id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let items: Vec<usize> = ranked.iter().take(list_len).map(|&(_, id)| id).collect();
        let list = world.items_of(&items)?;
        let (y_point, y_list) = simulate_feedback(click, user, &list, child_seed(seed ^ 0x5EED, j))?;
        out.interactions.push(InteractionRecord {
            user_id: pool.user_id,
            items,
            y_point,
            y_list,
        });
        out.pools.push(pool);
    }
    Ok(out)
}

/// Deterministic split: the last `fraction` of records are held out.
pub fn split_holdout<T: Clone>(records: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_test = ((records.len() as f64) * fraction).round() as usize;
    let cut = records.len() - n_test.min(records.len());
    (records[..cut].to_vec(), records[cut..].to_vec())
}

/// Everything `gen-data` writes: the world, train/test logs and train/test
/// candidate pools, each drawn from its own stream of `config.seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub world: World,
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub pools: Vec<CandidatePoolRecord>,
    pub test_pools: Vec<CandidatePoolRecord>,
}

pub fn generate_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let t = &config.task;
    let world = generate_world(&config.world, child_seed(config.seed, streams::WORLD))?;
    let data = build_dataset(
        &world,
        &config.world.click,
        t.n_lists,
        t.list_len,
        t.pool_size,
        child_seed(config.seed, streams::INTERACTIONS),
    )?;
    let (train, test) = split_holdout(&data.interactions, t.test_fraction);
    let pools = sample_pools(&world, t.n_pools, t.pool_size, child_seed(config.seed, streams::POOLS))?;
    let test_pools = sample_pools(&world, t.n_test_pools, t.pool_size, child_seed(config.seed, streams::TEST_POOLS))?;
    Ok(Experiment {
        world,
        train,
        test,
        pools,
        test_pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> World {
        let cfg = WorldConfig {
            users: 100,
            items: 1000,
            ..WorldConfig::default()
        };
        generate_world(&cfg, 3).unwrap()
    }

    #[test]
    fn world_is_deterministic_with_dense_ids() {
        let a = small_world();
        let b = small_world();
        assert_eq!(a, b);
        assert_eq!(a.users.len(), 100);
        assert_eq!(a.items.len(), 1000);
        assert!(a.users.iter().enumerate().all(|(i, u)| u.user_id == i));
        assert!(a.items.iter().enumerate().all(|(i, it)| it.item_id == i));
        for it in &a.items {
            assert!(it.feature_ids[1] < a.n_categories());
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = WorldConfig {
            users: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn latent_mean_near_zero() {
        let cfg = WorldConfig {
            users: 1,
            items: 25_000,
            latent_dim: 4,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg, 11).unwrap();
        let (sum, n) = w
            .items
            .iter()
            .flat_map(|i| i.latent.iter())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        assert_eq!(n, 100_000);
        assert!((sum / n as f64).abs() < 0.02);
    }

    #[test]
    fn order_invariance_without_position_or_redundancy() {
        let w = small_world();
        let click = ClickModel {
            position: 0.0,
            redundancy: 0.0,
            ..ClickModel::default()
        };
        let user = &w.users[0];
        let list = w.items_of(&[5, 9, 2, 77]).unwrap();
        let rev: Vec<&Item> = list.iter().rev().copied().collect();
        let p = click_probabilities(&click, user, &list).unwrap();
        let mut q = click_probabilities(&click, user, &rev).unwrap();
        q.reverse();
        assert_eq!(p, q);
    }

    #[test]
    fn redundant_items_are_penalised() {
        let w = small_world();
        let user = &w.users[1];
        let clone = |id| Item {
            item_id: id,
            feature_ids: vec![id, w.items[3].category()],
            latent: w.items[3].latent.clone(),
        };
        let copies: Vec<Item> = (0..4).map(clone).collect();
        let list: Vec<&Item> = copies.iter().collect();
        let click = ClickModel {
            redundancy: 4.0,
            ..ClickModel::default()
        };
        // Monte-Carlo over 10^4 seeds.
        let mut counts = [0u32; 4];
        for s in 0..10_000u64 {
            let (y, _) = simulate_feedback(&click, user, &list, s).unwrap();
            for (c, v) in counts.iter_mut().zip(&y) {
                *c += u32::from(*v);
            }
        }
        for k in 1..4 {
            assert!(counts[k] < counts[0], "{counts:?}");
        }
    }

    #[test]
    fn duplicates_rejected_and_utility_dominates_clicks() {
        let w = small_world();
        let user = &w.users[2];
        let dup = w.items_of(&[4, 4]).unwrap();
        assert!(simulate_feedback(&ClickModel::default(), user, &dup, 0).is_err());
        let list = w.items_of(&[1, 2, 3, 4, 5]).unwrap();
        for s in 0..200 {
            let (y, u) = simulate_feedback(&ClickModel::default(), user, &list, s).unwrap();
            assert!(u >= y.iter().map(|&v| f64::from(v)).sum::<f64>());
        }
    }

    #[test]
    fn click_probability_monotone_in_affinity() {
        let w = small_world();
        let click = ClickModel::default();
        let user = &w.users[0];
        let mut item = w.items[10].clone();
        let prev = w.items[11].clone();
        let mut last = 0.0;
        for step in 0..20 {
            // Moving along the user direction raises ⟨u,i⟩.
            let t = step as f64 * 0.1;
            item.latent = w.items[10]
                .latent
                .iter()
                .zip(&user.latent)
                .map(|(a, u)| a + t * u)
                .collect();
            let p = click_probabilities(&ClickModel { redundancy: 0.0, ..click }, user, &[&item, &prev]).unwrap()[0];
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn dataset_records_are_valid() {
        let w = small_world();
        let empty = build_dataset(&w, &ClickModel::default(), 0, 10, 20, 1).unwrap();
        assert!(empty.interactions.is_empty() && empty.pools.is_empty());
        assert!(build_dataset(&w, &ClickModel::default(), 1, 10, 2000, 1).is_err());

        let d = build_dataset(&w, &ClickModel::default(), 50, 10, 20, 1).unwrap();
        for (r, p) in d.interactions.iter().zip(&d.pools) {
            r.validate().unwrap();
            p.validate().unwrap();
            assert_eq!(r.items.len(), 10);
            assert_eq!(p.candidates.len(), 20);
            assert!(r.items.iter().all(|i| p.candidates.contains(i)));
        }
        assert_eq!(d, build_dataset(&w, &ClickModel::default(), 50, 10, 20, 1).unwrap());
    }

    #[test]
    fn default_positive_rate_is_calibrated() {
        let cfg = ExperimentConfig::default();
        let w = generate_world(&cfg.world, 5).unwrap();
        let d = build_dataset(&w, &cfg.world.click, 2000, 10, 20, 5).unwrap();
        let (pos, n) = d
            .interactions
            .iter()
            .flat_map(|r| r.y_point.iter())
            .fold((0usize, 0usize), |(p, n), &y| (p + usize::from(y), n + 1));
        let rate = pos as f64 / n as f64;
        assert!(rate > 0.05 && rate < 0.95, "positive rate {rate}");
    }

    #[test]
    fn experiment_is_reproducible_and_split() {
        let mut cfg = ExperimentConfig::default();
        cfg.world.users = 10;
        cfg.world.items = 80;
        cfg.task.n_lists = 50;
        cfg.task.n_pools = 7;
        cfg.task.n_test_pools = 3;
        let a = generate_experiment(&cfg).unwrap();
        assert_eq!(a, generate_experiment(&cfg).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (40, 10));
        assert_eq!((a.pools.len(), a.test_pools.len()), (7, 3));
        assert_ne!(a.pools[0], a.test_pools[0]);
        cfg.task.list_len = 30;
        assert!(matches!(generate_experiment(&cfg), Err(Error::Config(_))));
    }
}
