//! Grid sweeps over config fields.
//!
//! A grid file maps dotted config paths to arrays of values, either as
//! quoted keys (`"reasoning.alpha" = [1, 2, 5, 10]`) or inside tables
//! (`[reasoning]` / `alpha = [...]`). Points are the Cartesian product in
//! key order, last key varying fastest.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use toml::{Table, Value};

use eglr::config::{ExperimentConfig, ReasoningConfig};
use eglr::evaluator::{pretrain_evaluator, EvaluatorModel};
use eglr::generator::{generate_list, DecodeMode, GeneratorModel};
use eglr::metrics::evaluator_score;
use eglr::rng::{child_rng, child_seed, streams};
use eglr::sim::{generate_experiment, Experiment};
use eglr::training::{grpo_seed, train_generator, window_mean};

use crate::fail::{check_config, require_file, Failure};

pub type Grid = Vec<(String, Vec<Value>)>;

fn flatten(prefix: &str, table: &Table, out: &mut Grid) -> Result<(), Failure> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            Value::Table(t) => flatten(&path, t, out)?,
            Value::Array(vs) if !vs.is_empty() => out.push((path, vs.clone())),
            _ => return Err(Failure::InvalidConfig(format!("grid entry {path} must be a non-empty array"))),
        }
    }
    Ok(())
}

pub fn parse_grid(text: &str) -> Result<Grid, Failure> {
    let table: Table = toml::from_str(text).map_err(|e| Failure::InvalidConfig(format!("grid: {}", e.message())))?;
    let mut grid = Vec::new();
    flatten("", &table, &mut grid)?;
    grid.sort_by(|a, b| a.0.cmp(&b.0));
    if grid.is_empty() {
        return Err(Failure::InvalidConfig("grid has no entries".into()));
    }
    Ok(grid)
}

pub fn grid_points(grid: &Grid) -> Vec<Vec<Value>> {
    let mut points = vec![Vec::new()];
    for (_, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

/// `base` with each dotted path set to its value. Integers are accepted
/// where the config holds a float.
pub fn apply_point(base: &ExperimentConfig, keys: &[&str], values: &[Value]) -> Result<ExperimentConfig, Failure> {
    let mut doc = Value::try_from(base).map_err(|e| Failure::InvalidConfig(e.to_string()))?;
    for (key, value) in keys.iter().zip(values) {
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Failure::InvalidConfig(format!("unknown config key {key}")))?;
        }
        *slot = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
            _ => value.clone(),
        };
    }
    let cfg: ExperimentConfig = doc
        .try_into()
        .map_err(|e: toml::de::Error| Failure::InvalidConfig(e.message().to_owned()))?;
    check_config(&cfg)?;
    Ok(cfg)
}

fn display(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

struct Stage1 {
    exp: Experiment,
    evaluator: EvaluatorModel,
}

/// Generated data and pretrained evaluator depend on everything except the
/// reasoning section and the GRPO iteration count.
fn stage1_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.reasoning = ReasoningConfig::default();
    c.optim.grpo_iterations = 0;
    c.to_toml()
}

pub struct SweepRow {
    pub values: Vec<String>,
    pub final_reward: f64,
    pub eval_score: f64,
    pub reason_steps_per_list: f64,
    pub mean_latency_s: f64,
}

fn run_point(cfg: &ExperimentConfig, cache: &mut HashMap<String, Stage1>) -> Result<(f64, f64, f64, f64)> {
    if cfg.task.n_pools == 0 || cfg.task.n_test_pools == 0 {
        bail!("sweep needs task.n_pools > 0 and task.n_test_pools > 0");
    }
    let key = stage1_key(cfg);
    if !cache.contains_key(&key) {
        let exp = generate_experiment(cfg)?;
        let mut evaluator = EvaluatorModel::new(cfg)?;
        pretrain_evaluator(&mut evaluator, &exp.world, &exp.train, cfg.optim.eval_epochs)?;
        cache.insert(key.clone(), Stage1 { exp, evaluator });
    }
    let Stage1 { exp, evaluator } = &cache[&key];
    let mut gen = GeneratorModel::new(cfg, &evaluator.params)?;
    let log = train_generator(&mut gen, evaluator, &exp.world, &exp.pools, cfg.optim.grpo_iterations, grpo_seed(cfg))?;
    let rewards: Vec<f64> = log.iter().map(|r| r.mean_reward).collect();
    let final_reward = window_mean(&rewards, rewards.len().saturating_sub(100), rewards.len());

    let seed = child_seed(cfg.seed, streams::RERANK);
    let (mut score, mut reason, mut time) = (0.0, 0usize, 0.0);
    for (j, pool) in exp.test_pools.iter().enumerate() {
        let user = exp.world.user(pool.user_id)?;
        let cands = exp.world.items_of(&pool.candidates)?;
        let start = Instant::now();
        let list = generate_list(&gen, user, &cands, DecodeMode::Greedy, &mut child_rng(seed, j as u64))?;
        time += start.elapsed().as_secs_f64();
        reason += list.trace.reason_steps();
        score += evaluator_score(evaluator, user, &exp.world.items_of(&list.items)?)?;
    }
    let n = exp.test_pools.len() as f64;
    Ok((final_reward, score / n, reason as f64 / n, time / n))
}

/// Trains and evaluates one generator per grid point. Latency is written
/// only with `timing`, since it is the one non-reproducible column.
pub fn sweep(base: &ExperimentConfig, grid_path: &Path, report: &Path, timing: bool) -> Result<Vec<SweepRow>> {
    require_file(grid_path)?;
    let grid = parse_grid(&std::fs::read_to_string(grid_path)?)?;
    let keys: Vec<&str> = grid.iter().map(|(k, _)| k.as_str()).collect();
    let points = grid_points(&grid);
    let configs = points
        .iter()
        .map(|p| apply_point(base, &keys, p))
        .collect::<Result<Vec<_>, _>>()?;

    let mut cache = HashMap::new();
    let mut rows = Vec::with_capacity(points.len());
    for (point, cfg) in points.iter().zip(&configs) {
        let (final_reward, eval_score, reason_steps_per_list, mean_latency_s) = run_point(cfg, &mut cache)?;
        let values: Vec<String> = point.iter().map(display).collect();
        eprintln!("{}: eval score {eval_score:.4}, reasoning {reason_steps_per_list:.3}/list", values.join(", "));
        rows.push(SweepRow {
            values,
            final_reward,
            eval_score,
            reason_steps_per_list,
            mean_latency_s,
        });
    }

    let mut w = csv::Writer::from_path(report)?;
    let mut header: Vec<&str> = keys.clone();
    header.extend(["final_reward", "eval_score", "reason_steps_per_list"]);
    if timing {
        header.push("mean_latency_s");
    }
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = r.values.clone();
        rec.extend([r.final_reward, r.eval_score, r.reason_steps_per_list].map(|v| v.to_string()));
        if timing {
            rec.push(r.mean_latency_s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms_are_equivalent_and_ordered() {
        let a = parse_grid("\"reasoning.alpha\" = [1, 2]\nseed = [5, 6, 7]\n").unwrap();
        let b = parse_grid("seed = [5, 6, 7]\n[reasoning]\nalpha = [1, 2]\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].0, "reasoning.alpha");
        let pts = grid_points(&a);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], vec![Value::Integer(1), Value::Integer(6)]);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(parse_grid("").is_err());
        assert!(parse_grid("seed = 3").is_err());
        assert!(parse_grid("seed = []").is_err());
    }

    #[test]
    fn points_override_fields() {
        let base = ExperimentConfig::default();
        let cfg = apply_point(&base, &["reasoning.alpha", "seed"], &[Value::Integer(5), Value::Integer(9)]).unwrap();
        assert_eq!(cfg.reasoning.alpha, 5.0);
        assert_eq!(cfg.seed, 9);
        assert!(apply_point(&base, &["reasoning.nope"], &[Value::Integer(1)]).is_err());
        assert!(apply_point(&base, &["reasoning.alpha"], &[Value::Float(0.5)]).is_err());
        assert!(matches!(
            apply_point(&base, &["task.list_len"], &[Value::Integer(50)]),
            Err(Failure::ListTooLong { k: 50, m: 20 })
        ));
    }
}
