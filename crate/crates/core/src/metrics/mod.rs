//! Ranking metrics, evaluator score, Pass@K and trace analysis reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{arg_err, Result};
use crate::evaluator::EvaluatorModel;
use crate::generator::{generate_list, DecodeMode, GenerationTrace, GeneratorModel, StepKind};
use crate::rng::child_rng;
use crate::sim::{position_discount, InteractionRecord, Item, UserProfile, World};
use crate::training::{csv_err, reward_dcg};

fn check_k(labels: &[u8], k: usize) -> Result<()> {
    if k == 0 || k > labels.len() {
        return arg_err(format!("k={k} must be in 1..={}", labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return arg_err("ranking labels must be binary");
    }
    Ok(())
}

/// Binary-gain NDCG@k; 0 when there are no positives.
pub fn ndcg_at_k(labels: &[u8], k: usize) -> Result<f64> {
    check_k(labels, k)?;
    let dcg: f64 = labels[..k]
        .iter()
        .enumerate()
        .map(|(i, &y)| f64::from(y) * position_discount(i + 1))
        .sum();
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let idcg: f64 = (1..=positives.min(k)).map(position_discount).sum();
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

/// Sum of precision@i over positive ranks `i ≤ k`, divided by
/// `min(k, positives)`; 0 when there are no positives.
pub fn map_at_k(labels: &[u8], k: usize) -> Result<f64> {
    check_k(labels, k)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    let mut total = 0.0;
    for (i, &y) in labels[..k].iter().enumerate() {
        if y == 1 {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(total / positives.min(k) as f64)
}

/// DCG of the evaluator's per-item predictions for `list`.
pub fn evaluator_score(evaluator: &EvaluatorModel, user: &UserProfile, list: &[&Item]) -> Result<f64> {
    reward_dcg(&evaluator.forward(user, list)?.y_point_hat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassAtK {
    pub best_list: Vec<usize>,
    pub best_score: f64,
    pub scores: Vec<f64>,
}

/// `kpass` sampled rollouts (rollout `r` on child stream `r` of `seed`),
/// keeping the one the evaluator scores highest (first on ties).
pub fn pass_at_k(
    gen: &GeneratorModel,
    evaluator: &EvaluatorModel,
    world: &World,
    user: &UserProfile,
    candidates: &[&Item],
    kpass: usize,
    seed: u64,
) -> Result<PassAtK> {
    if kpass == 0 {
        return arg_err("Pass@K needs K >= 1");
    }
    let mut lists = Vec::with_capacity(kpass);
    for r in 0..kpass as u64 {
        lists.push(generate_list(gen, user, candidates, DecodeMode::Sample, &mut child_rng(seed, r))?.items);
    }
    let batch = lists
        .iter()
        .map(|l| Ok((user, world.items_of(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let scores = evaluator
        .forward_batch(&batch)?
        .iter()
        .map(|o| reward_dcg(&o.y_point_hat))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(PassAtK {
        best_list: lists.swap_remove(best),
        best_score: scores[best],
        scores,
    })
}

/// Named metric values for one model or configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub lists: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// MAP@k, NDCG@k (labels travel with their items) and mean evaluator score
/// of `rankings`, each a reordering of the matching record's items.
pub fn ranking_report(
    name: &str,
    evaluator: &EvaluatorModel,
    world: &World,
    records: &[InteractionRecord],
    rankings: &[Vec<usize>],
    ks: &[usize],
) -> Result<MetricReport> {
    if records.is_empty() || records.len() != rankings.len() {
        return arg_err("need one ranking per record and at least one record");
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (r, ranking) in records.iter().zip(rankings) {
        let ks: BTreeSet<usize> = ks.iter().map(|&k| k.min(ranking.len())).collect();
        let label_of: BTreeMap<usize, u8> = r.items.iter().copied().zip(r.y_point.iter().copied()).collect();
        let labels = ranking
            .iter()
            .map(|id| {
                label_of
                    .get(id)
                    .copied()
                    .ok_or_else(|| crate::Error::Argument(format!("ranked item {id} is not in the logged list")))
            })
            .collect::<Result<Vec<u8>>>()?;
        for &k in &ks {
            *sums.entry(format!("map@{k}")).or_default() += map_at_k(&labels, k)?;
            *sums.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&labels, k)?;
        }
        let score = evaluator_score(evaluator, world.user(r.user_id)?, &world.items_of(ranking)?)?;
        *sums.entry("evaluator_score".into()).or_default() += score;
    }
    let n = records.len() as f64;
    Ok(MetricReport {
        name: name.to_owned(),
        lists: records.len(),
        metrics: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
    })
}

/// One row per report: `model,lists,<metric columns in name order>`.
pub fn write_metric_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return arg_err("no reports to write");
    };
    let columns: Vec<&String> = first.metrics.keys().collect();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["model".to_owned(), "lists".to_owned()];
    header.extend(columns.iter().map(|c| c.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        if r.metrics.len() != columns.len() || !columns.iter().all(|c| r.metrics.contains_key(*c)) {
            return arg_err("all reports must carry the same metrics");
        }
        let mut row = vec![r.name.clone(), r.lists.to_string()];
        row.extend(columns.iter().map(|c| r.metrics[*c].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-position entropy statistics over a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyProfile {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub trigger_rate: Vec<f64>,
    pub samples: Vec<usize>,
    pub triggered: Vec<usize>,
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// For each list position, the entropy at the first step of its run
/// ("before") and at its SELECT ("after"), averaged over runs that
/// reasoned. Positions where no run reasoned report the mean SELECT
/// entropy for both.
pub fn entropy_profile(traces: &[GenerationTrace]) -> Result<EntropyProfile> {
    let Some(first) = traces.first() else {
        return arg_err("entropy profile needs at least one trace");
    };
    let k = first.selections().count();
    let mut before = vec![Vec::new(); k];
    let mut after = vec![Vec::new(); k];
    let mut select = vec![Vec::new(); k];
    let mut samples = vec![0; k];
    for t in traces {
        let runs = t.runs();
        if runs.len() != k {
            return arg_err("traces must all select the same number of items");
        }
        for (pos, run) in runs.iter().enumerate() {
            samples[pos] += 1;
            let sel = run[run.len() - 1].entropy_before;
            select[pos].push(sel);
            if run[0].kind == StepKind::Reason {
                before[pos].push(run[0].entropy_before);
                after[pos].push(sel);
            }
        }
    }
    let mut p = EntropyProfile {
        before: Vec::with_capacity(k),
        after: Vec::with_capacity(k),
        trigger_rate: Vec::with_capacity(k),
        samples: samples.clone(),
        triggered: before.iter().map(Vec::len).collect(),
    };
    for pos in 0..k {
        p.trigger_rate.push(before[pos].len() as f64 / samples[pos] as f64);
        if before[pos].is_empty() {
            let m = sorted_mean(std::mem::take(&mut select[pos]));
            p.before.push(m);
            p.after.push(m);
        } else {
            p.before.push(sorted_mean(std::mem::take(&mut before[pos])));
            p.after.push(sorted_mean(std::mem::take(&mut after[pos])));
        }
    }
    Ok(p)
}

#[derive(Serialize)]
struct ProfileRow {
    position: usize,
    entropy_before: f64,
    entropy_after: f64,
    trigger_rate: f64,
    samples: usize,
    triggered: usize,
}

/// One row per list position (1-based).
pub fn write_entropy_profile(path: &Path, p: &EntropyProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for i in 0..p.before.len() {
        w.serialize(ProfileRow {
            position: i + 1,
            entropy_before: p.before[i],
            entropy_after: p.after[i],
            trigger_rate: p.trigger_rate[i],
            samples: p.samples[i],
            triggered: p.triggered[i],
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub max_reasoning_steps: usize,
    pub lists: usize,
    pub reason_steps_per_list: f64,
    pub mean_latency_s: f64,
}

/// Reasoning steps per list and mean wall time for one configuration.
pub fn efficiency_report(max_reasoning_steps: usize, traces: &[GenerationTrace], wall_times: &[f64]) -> Result<EfficiencyRow> {
    if traces.len() != wall_times.len() {
        return arg_err(format!("{} traces but {} wall times", traces.len(), wall_times.len()));
    }
    if traces.is_empty() {
        return arg_err("efficiency report needs at least one trace");
    }
    let n = traces.len() as f64;
    let reason: usize = traces.iter().map(GenerationTrace::reason_steps).sum();
    Ok(EfficiencyRow {
        max_reasoning_steps,
        lists: traces.len(),
        reason_steps_per_list: reason as f64 / n,
        mean_latency_s: wall_times.iter().sum::<f64>() / n,
    })
}

pub fn write_efficiency_report(path: &Path, rows: &[EfficiencyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
