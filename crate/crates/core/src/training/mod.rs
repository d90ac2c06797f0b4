//! Rewards, group-relative advantages, the policy-gradient objective and the
//! on-policy training loop.

mod adam;
mod rewards;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use rewards::{group_advantages, reward, reward_dcg, reward_listwise};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{arg_err, Result};
use crate::evaluator::EvaluatorModel;
use crate::generator::{encode_pool, rollout, DecodeMode, GeneratorModel, Rollout};
use crate::nn::layers::Binding;
use crate::nn::{Tape, Tensor, Var};
use crate::rng::{child_rng, child_seed};
use crate::sim::{CandidatePoolRecord, World};

/// `G` rollouts of one pool with their rewards and advantages.
#[derive(Debug, Clone)]
pub struct GroupSample {
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn new(rollouts: Vec<Rollout>, rewards: Vec<f64>) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return arg_err("one reward per rollout required");
        }
        let advantages = group_advantages(&rewards);
        Ok(Self {
            rollouts,
            rewards,
            advantages,
        })
    }
}

/// `−(1/G) Σ_g logprob_g · Â_g` with the advantages as constants. The
/// rollouts must have been generated on `tape`.
pub fn grpo_loss(tape: &mut Tape, group: &GroupSample) -> Result<Var> {
    let g = group.rollouts.len();
    if g == 0 {
        return arg_err("empty rollout group");
    }
    if group.advantages.len() != g {
        return arg_err("one advantage per rollout required");
    }
    let mut loss: Option<Var> = None;
    for (r, &a) in group.rollouts.iter().zip(&group.advantages) {
        let Some(lp) = r.logprob_var else { continue };
        let term = tape.scale(lp, -a / g as f64)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(loss.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Mean pre-step decision entropy over every step of the group.
    pub mean_entropy: f64,
    pub reason_steps_per_list: f64,
    pub loss: f64,
}

/// Runs one GRPO update on `pool` and returns its log row. Rollout `g` draws
/// from child stream `g` of `seed`.
pub fn grpo_iteration(
    gen: &mut GeneratorModel,
    evaluator: &EvaluatorModel,
    world: &World,
    pool: &CandidatePoolRecord,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<(GroupSample, f64)> {
    let cfg = &gen.config;
    let user = world.user(pool.user_id)?;
    let cands = world.items_of(&pool.candidates)?;
    let enc = encode_pool(gen, user, &cands)?;
    let mut tape = Tape::new();
    let mut rollouts = Vec::with_capacity(cfg.reasoning.group_size);
    for g in 0..cfg.reasoning.group_size as u64 {
        let r = rollout(&mut tape, gen, &enc, Binding::Trainable, DecodeMode::Sample, &mut child_rng(seed, g))?;
        rollouts.push(r);
    }
    let lists = rollouts
        .iter()
        .map(|r| Ok((user, world.items_of(&r.items)?)))
        .collect::<Result<Vec<_>>>()?;
    let outputs = evaluator.forward_batch(&lists)?;
    let rewards = outputs
        .iter()
        .map(|o| reward(cfg.reasoning.reward, o))
        .collect::<Result<Vec<_>>>()?;
    let group = GroupSample::new(rollouts, rewards)?;
    let loss = grpo_loss(&mut tape, &group)?;
    let grads = tape.backward(loss)?;
    opt.step(&mut gen.params, &grads)?;
    Ok((group, tape.scalar(loss)))
}

fn summarize(iteration: usize, group: &GroupSample, loss: f64) -> IterationLog {
    let g = group.rewards.len() as f64;
    let mean = group.rewards.iter().sum::<f64>() / g;
    let var = group.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let steps: Vec<f64> = group
        .rollouts
        .iter()
        .flat_map(|r| r.trace.steps.iter().map(|s| s.entropy_before))
        .collect();
    let reason: usize = group.rollouts.iter().map(|r| r.trace.reason_steps()).sum();
    IterationLog {
        iteration,
        mean_reward: mean,
        std_reward: var.sqrt(),
        mean_entropy: steps.iter().sum::<f64>() / steps.len().max(1) as f64,
        reason_steps_per_list: reason as f64 / g,
        loss,
    }
}

/// On-policy GRPO against a frozen evaluator: one Adam step per pool,
/// cycling through `pools` in order. Only `dec.*` parameters change.
pub fn train_generator(
    gen: &mut GeneratorModel,
    evaluator: &EvaluatorModel,
    world: &World,
    pools: &[CandidatePoolRecord],
    iterations: usize,
    seed: u64,
) -> Result<Vec<IterationLog>> {
    if pools.is_empty() {
        return arg_err("cannot train the generator without candidate pools");
    }
    let mut opt = OptimizerState::new(AdamConfig::from(&gen.config.optim));
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let pool = &pools[it % pools.len()];
        let (group, loss) = grpo_iteration(gen, evaluator, world, pool, &mut opt, child_seed(seed, it as u64))?;
        log.push(summarize(it, &group, loss));
    }
    Ok(log)
}

/// Mean of `values[from..to]` (clamped to the slice).
pub fn window_mean(values: &[f64], from: usize, to: usize) -> f64 {
    let to = to.min(values.len());
    let from = from.min(to);
    if from == to {
        return f64::NAN;
    }
    values[from..to].iter().sum::<f64>() / (to - from) as f64
}

pub fn write_training_log(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in log {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::Error::Io(io),
        other => crate::Error::Argument(format!("csv: {other:?}")),
    }
}

/// Seed used by [`train_generator`] when driven from a config.
pub fn grpo_seed(config: &ExperimentConfig) -> u64 {
    child_seed(config.seed, crate::rng::streams::GRPO)
}

#[cfg(test)]
mod tests;
