//! The list generator.
//!
//! Candidates are embedded with the shared tables, refined by the shared
//! MLP and sum-pooled into a context `c_gen`. A one-layer causal decoder
//! then runs over `S = [c_gen, …]`; at each step the decision entropy at
//! `τ₀` decides between appending a reasoning token (a softmax-weighted mix
//! of remaining candidates at `τ₀·α`) and selecting an item at `τ₀/α`.

mod decode;
mod trace;

pub use decode::{replay, rollout, rollout_with, Choice, DecoderState, Rollout};
pub use trace::{write_traces, GenerationTrace, StepKind, StepRecord};

use std::path::Path;

use rand::Rng;

use crate::checkpoint::{self, ModelKind};
use crate::config::ExperimentConfig;
use crate::error::{arg_err, Error, Result};
use crate::evaluator::{init_shared, SharedVars, SHARED_PREFIX};
use crate::nn::functional::{log_softmax_unchecked, softmax_unchecked};
use crate::nn::layers::{init_transformer_layer, Binding};
use crate::nn::{entropy, ParameterSet, Tape, Tensor};
use crate::rng::{child_rng, child_seed, rng_from_seed, streams};
use crate::sim::{all_distinct, Item, UserProfile};

pub const DECODER_PREFIX: &str = "dec.";
pub(crate) const DECODER_LAYER: &str = "dec.layer";

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: ExperimentConfig,
    pub params: ParameterSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Categorical draw from the selection distribution.
    Sample,
    /// Argmax, lowest item id on ties.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Reason,
    Recommend,
}

/// A generated list with its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedList {
    pub items: Vec<usize>,
    pub trace: GenerationTrace,
    pub logprob_sum: f64,
}

impl GeneratorModel {
    /// Fresh decoder weights; embeddings and the refine MLP are copied from
    /// `shared` (normally a pretrained evaluator's parameters).
    pub fn new(config: &ExperimentConfig, shared: &ParameterSet) -> Result<Self> {
        Self::with_seed(config, shared, child_seed(config.seed, streams::GENERATOR_INIT))
    }

    pub fn with_seed(config: &ExperimentConfig, shared: &ParameterSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = shared.with_prefix(SHARED_PREFIX);
        let mut reference = ParameterSet::new();
        init_shared(&mut reference, config, &mut rng_from_seed(0))?;
        checkpoint::check_compatible(&params, &reference)
            .map_err(|e| Error::Argument(format!("shared parameters do not fit this config: {e}")))?;
        init_transformer_layer(&mut params, DECODER_LAYER, config.model.width(), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// A generator whose shared parameters are freshly initialised.
    pub fn standalone(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut shared = ParameterSet::new();
        init_shared(&mut shared, config, &mut child_rng(seed, 0))?;
        Self::with_seed(config, &shared, child_seed(seed, 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Generator, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        if ck.kind != ModelKind::Generator {
            return Err(Error::Checkpoint(format!("{} is not a generator checkpoint", path.display())));
        }
        let reference = Self::standalone(&ck.config, 0)?;
        checkpoint::check_compatible(&ck.params, &reference.params)?;
        Ok(Self {
            config: ck.config,
            params: ck.params,
        })
    }

    pub fn shared_params(&self) -> ParameterSet {
        self.params.with_prefix(SHARED_PREFIX)
    }

    pub fn decoder_params(&self) -> ParameterSet {
        self.params.with_prefix(DECODER_PREFIX)
    }
}

/// Refined candidate embeddings in ascending item-id order and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEncoding {
    /// Candidate ids, ascending; row `r` of `e_refine` belongs to `ids[r]`.
    pub ids: Vec<usize>,
    pub e_refine: Tensor,
    pub c_gen: Vec<f64>,
}

impl PoolEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.e_refine.row_slice(r)
    }
}

/// `E_refine = ReLU(E_joint W + b)` and `c_gen = Σ rows`, both computed
/// over candidates sorted by id so the result does not depend on pool order.
pub fn encode_pool(model: &GeneratorModel, user: &UserProfile, candidates: &[&Item]) -> Result<PoolEncoding> {
    if candidates.is_empty() {
        return arg_err("empty candidate pool");
    }
    let mut sorted: Vec<&Item> = candidates.to_vec();
    sorted.sort_by_key(|i| i.item_id);
    let ids: Vec<usize> = sorted.iter().map(|i| i.item_id).collect();
    if !all_distinct(&ids) {
        return arg_err("candidate pool contains duplicate items");
    }
    let mut tape = Tape::new();
    let shared = SharedVars::bind(&mut tape, &model.params, Binding::Frozen)?;
    let pairs: Vec<(&UserProfile, &Item)> = sorted.iter().map(|&i| (user, i)).collect();
    let joint = shared.joint(&mut tape, &pairs)?;
    let refined = shared.refine(&mut tape, joint)?;
    let c_gen = tape.sum_rows(refined)?;
    Ok(PoolEncoding {
        ids,
        e_refine: tape.value(refined).clone(),
        c_gen: tape.data(c_gen).to_vec(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `l_i = z · e_i` for each remaining row index, in the given order.
pub fn candidate_logits(z: &[f64], pool: &PoolEncoding, remaining: &[usize]) -> Result<Vec<f64>> {
    if remaining.is_empty() {
        return Err(Error::State("no remaining candidates to score".into()));
    }
    remaining
        .iter()
        .map(|&r| {
            if r >= pool.len() {
                return arg_err(format!("candidate row {r} out of range"));
            }
            Ok(dot(z, pool.row(r)))
        })
        .collect()
}

/// `p = softmax(logits / τ₀)` and its entropy, clamped to `[0, ln n]`.
pub fn step_entropy(logits: &[f64], tau0: f64) -> Result<(Vec<f64>, f64)> {
    let p = crate::nn::softmax_with_temperature(logits, tau0)?;
    let h = entropy(&p).min((logits.len() as f64).ln());
    Ok((p, h))
}

/// `a = softmax(z·E_rem / (τ₀·α))`, `z_REA = Σ a_i e_i`.
pub fn build_reasoning_token(
    z: &[f64],
    pool: &PoolEncoding,
    remaining: &[usize],
    tau0: f64,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau0 > 0.0) || !(alpha > 0.0) {
        return arg_err("tau0 and alpha must be positive");
    }
    let logits = candidate_logits(z, pool, remaining)?;
    let a = crate::nn::softmax_with_temperature(&logits, tau0 * alpha)?;
    let mut token = vec![0.0; z.len()];
    for (&r, &w) in remaining.iter().zip(&a) {
        for (t, e) in token.iter_mut().zip(pool.row(r)) {
            *t += w * e;
        }
    }
    Ok((token, a))
}

/// `τ₀·α` while reasoning, `τ₀/α` while recommending.
pub fn effective_temperature(stage: Stage, tau0: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 1.0) {
        return arg_err(format!("alpha must be >= 1, got {alpha}"));
    }
    if !(tau0 > 0.0) {
        return arg_err(format!("tau0 must be positive, got {tau0}"));
    }
    Ok(match stage {
        Stage::Reason => tau0 * alpha,
        Stage::Recommend => tau0 / alpha,
    })
}

/// Index drawn from `probs` by inverse CDF.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn selection_log_probs(logits: &[f64], tau: f64) -> Vec<f64> {
    log_softmax_unchecked(logits, tau)
}

pub(crate) fn selection_probs(logits: &[f64], tau: f64) -> Vec<f64> {
    softmax_unchecked(logits, tau)
}

fn check_pool(model: &GeneratorModel, candidates: &[&Item]) -> Result<()> {
    let k = model.config.task.list_len;
    if candidates.len() < k {
        return arg_err(format!("pool of M={} candidates is smaller than K={k}", candidates.len()));
    }
    Ok(())
}

/// One rollout, gradient-free.
pub fn generate_list<R: Rng + ?Sized>(
    model: &GeneratorModel,
    user: &UserProfile,
    candidates: &[&Item],
    mode: DecodeMode,
    rng: &mut R,
) -> Result<GeneratedList> {
    check_pool(model, candidates)?;
    let pool = encode_pool(model, user, candidates)?;
    let mut tape = Tape::new();
    let r = rollout(&mut tape, model, &pool, Binding::Frozen, mode, rng)?;
    Ok(r.into_list())
}

/// `G` independent sampled rollouts; rollout `g` uses child stream `g` of
/// `seed`.
pub fn generate_group(
    model: &GeneratorModel,
    user: &UserProfile,
    candidates: &[&Item],
    group_size: usize,
    seed: u64,
) -> Result<Vec<GeneratedList>> {
    if group_size == 0 {
        return arg_err("group size must be at least 1");
    }
    check_pool(model, candidates)?;
    let pool = encode_pool(model, user, candidates)?;
    (0..group_size as u64)
        .map(|g| {
            let mut tape = Tape::new();
            let r = rollout(&mut tape, model, &pool, Binding::Frozen, DecodeMode::Sample, &mut child_rng(seed, g))?;
            Ok(r.into_list())
        })
        .collect()
}
