use crate::config::RewardMode;
use crate::error::{arg_err, Result};
use crate::evaluator::EvaluatorOutput;
use crate::sim::position_discount;

/// `Σ_k (2^{ŷ_k} − 1) / log2(k + 1)` over 1-based positions.
pub fn reward_dcg(y_point_hat: &[f64]) -> Result<f64> {
    if let Some(bad) = y_point_hat.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return arg_err(format!("DCG scores must lie in [0, 1], got {bad}"));
    }
    Ok(y_point_hat
        .iter()
        .enumerate()
        .map(|(k, y)| (y.exp2() - 1.0) * position_discount(k + 1))
        .sum())
}

pub fn reward_listwise(y_cls_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_cls_hat) {
        return arg_err(format!("list score must lie in [0, 1], got {y_cls_hat}"));
    }
    Ok(y_cls_hat)
}

pub fn reward(mode: RewardMode, out: &EvaluatorOutput) -> Result<f64> {
    match mode {
        RewardMode::Dcg => reward_dcg(&out.y_point_hat),
        RewardMode::Listwise => reward_listwise(out.y_cls_hat),
    }
}

/// `(r − mean) / (population std + 1e-8)`; exactly zero for a constant
/// group.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let rough = rewards.iter().sum::<f64>() / n;
    let mean = rough + rewards.iter().map(|r| r - rough).sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}
