use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use eglr::config::ExperimentConfig;
use eglr::evaluator::{evaluate_losses, EvaluatorModel, EvaluatorTrainer};
use eglr::generator::{generate_list, write_traces, DecodeMode, GenerationTrace, GeneratorModel};
use eglr::metrics::{
    efficiency_report, entropy_profile, evaluator_score, pass_at_k, ranking_report, write_efficiency_report,
    write_entropy_profile, write_metric_reports,
};
use eglr::rng::{child_rng, child_seed, streams};
use eglr::sim::{
    generate_experiment, read_interactions, read_pools, read_world, write_jsonl, write_world, CandidatePoolRecord,
    World,
};
use eglr::training::{grpo_seed, train_generator, window_mean, write_training_log};

use crate::fail::{check_config, require_file, Failure};

pub const SEED_ENV: &str = "EGLR_SEED";

pub fn apply_seed_override(cfg: &mut ExperimentConfig) -> Result<(), Failure> {
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| Failure::InvalidConfig(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
    }
    Ok(())
}

/// Defaults when `path` is `None`; `EGLR_SEED` wins over the file.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Failure::InvalidConfig(format!("{}: {}", p.display(), e.message())))?
        }
        None => ExperimentConfig::default(),
    };
    apply_seed_override(&mut cfg)?;
    check_config(&cfg)?;
    Ok(cfg)
}

fn load_evaluator(path: &Path) -> Result<EvaluatorModel> {
    require_file(path)?;
    let mut m = EvaluatorModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    apply_seed_override(&mut m.config)?;
    Ok(m)
}

fn load_generator(path: &Path) -> Result<GeneratorModel> {
    require_file(path)?;
    let mut m = GeneratorModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    apply_seed_override(&mut m.config)?;
    Ok(m)
}

/// `explicit`, or `world.json` in the directory of `beside`.
fn load_world(explicit: Option<&Path>, beside: &Path, cfg: &ExperimentConfig) -> Result<World> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => beside.parent().unwrap_or(Path::new("")).join("world.json"),
    };
    require_file(&path)?;
    let world = read_world(&path)?;
    check_world(&world, cfg, &path)?;
    Ok(world)
}

fn check_world(world: &World, cfg: &ExperimentConfig, path: &Path) -> Result<(), Failure> {
    let w = &cfg.world;
    if world.users.len() != w.users
        || world.items.len() != w.items
        || world.item_vocab != w.item_vocab()
        || world.user_vocab != w.user_vocab()
    {
        return Err(Failure::InvalidConfig(format!(
            "{} has {} users and {} items but the model expects {} and {}",
            path.display(),
            world.users.len(),
            world.items.len(),
            w.users,
            w.items
        )));
    }
    Ok(())
}

fn check_pools(pools: &[CandidatePoolRecord], k: usize) -> Result<(), Failure> {
    match pools.iter().find(|p| p.candidates.len() < k) {
        Some(p) => Err(Failure::ListTooLong {
            k,
            m: p.candidates.len(),
        }),
        None => Ok(()),
    }
}

fn load_pools(path: &Path, k: usize) -> Result<Vec<CandidatePoolRecord>> {
    require_file(path)?;
    let pools = read_pools(path)?;
    if pools.is_empty() {
        bail!("{} contains no candidate pools", path.display());
    }
    check_pools(&pools, k)?;
    Ok(pools)
}

fn same_architecture(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.model == b.model
        && a.world.users == b.world.users
        && a.world.items == b.world.items
        && a.world.category_bits == b.world.category_bits
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let exp = generate_experiment(cfg)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    write_world(&out.join("world.json"), &exp.world)?;
    write_jsonl(&out.join("interactions.jsonl"), &exp.train)?;
    write_jsonl(&out.join("interactions_test.jsonl"), &exp.test)?;
    write_jsonl(&out.join("pools.jsonl"), &exp.pools)?;
    write_jsonl(&out.join("pools_test.jsonl"), &exp.test_pools)?;
    eprintln!(
        "wrote {}: {} train / {} test lists, {} train / {} test pools",
        out.display(),
        exp.train.len(),
        exp.test.len(),
        exp.pools.len(),
        exp.test_pools.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_point: f64,
    train_list: f64,
    test_point: Option<f64>,
    test_list: Option<f64>,
}

pub struct TrainEvaluatorArgs<'a> {
    pub data: &'a Path,
    pub test: Option<&'a Path>,
    pub world: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
}

pub fn train_evaluator(cfg: &ExperimentConfig, args: TrainEvaluatorArgs) -> Result<()> {
    require_file(args.data)?;
    let records = read_interactions(args.data)?;
    if records.is_empty() {
        bail!("{} contains no interactions", args.data.display());
    }
    let test = match args.test {
        Some(p) => {
            require_file(p)?;
            Some(read_interactions(p)?)
        }
        None => None,
    };
    let world = load_world(args.world, args.data, cfg)?;
    let mut model = EvaluatorModel::new(cfg)?;
    let mut trainer = EvaluatorTrainer::new(cfg);
    let mut rows = Vec::with_capacity(cfg.optim.eval_epochs);
    for epoch in 0..cfg.optim.eval_epochs {
        let train = trainer.run_epoch(&mut model, &world, &records)?;
        let held = match &test {
            Some(t) if !t.is_empty() => Some(evaluate_losses(&model, &world, t)?),
            _ => None,
        };
        eprintln!(
            "epoch {epoch}: train point {:.5} list {:.5}{}",
            train.point,
            train.list,
            held.as_ref()
                .map(|h| format!(", test point {:.5} list {:.5}", h.point, h.list))
                .unwrap_or_default()
        );
        rows.push(EpochRow {
            epoch,
            train_point: train.point,
            train_list: train.list,
            test_point: held.as_ref().map(|h| h.point),
            test_list: held.as_ref().map(|h| h.list),
        });
    }
    model.save(args.out)?;
    if let Some(log) = args.log {
        let mut w = csv::Writer::from_path(log)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub struct TrainGeneratorArgs<'a> {
    pub config: Option<&'a Path>,
    pub evaluator: &'a Path,
    pub pools: &'a Path,
    pub world: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub iterations: Option<usize>,
}

pub fn train_generator_cmd(args: TrainGeneratorArgs) -> Result<()> {
    let evaluator = load_evaluator(args.evaluator)?;
    let mut cfg = match args.config {
        Some(p) => load_config(Some(p))?,
        None => {
            let mut c = evaluator.config.clone();
            apply_seed_override(&mut c)?;
            c
        }
    };
    if let Some(n) = args.iterations {
        cfg.optim.grpo_iterations = n;
    }
    check_config(&cfg)?;
    if !same_architecture(&cfg, &evaluator.config) {
        return Err(Failure::InvalidConfig(
            "model/world dimensions differ from the evaluator checkpoint's config".into(),
        )
        .into());
    }
    let pools = load_pools(args.pools, cfg.task.list_len)?;
    let world = load_world(args.world, args.pools, &cfg)?;
    let mut gen = GeneratorModel::new(&cfg, &evaluator.params)?;
    let log = train_generator(&mut gen, &evaluator, &world, &pools, cfg.optim.grpo_iterations, grpo_seed(&cfg))?;
    gen.save(args.out)?;
    if let Some(path) = args.log {
        write_training_log(path, &log)?;
    }
    let rewards: Vec<f64> = log.iter().map(|r| r.mean_reward).collect();
    let n = rewards.len();
    if n > 0 {
        eprintln!(
            "{n} iterations: mean reward first {:.4}, last {:.4} (windows of up to 100)",
            window_mean(&rewards, 0, 100),
            window_mean(&rewards, n.saturating_sub(100), n)
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RerankMode {
    Greedy,
    Sample,
    PassAt(usize),
}

impl FromStr for RerankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            _ => match s.strip_prefix("pass@").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(Self::PassAt(k)),
                _ => Err(format!("expected greedy, sample or pass@K with K >= 1, got {s:?}")),
            },
        }
    }
}

#[derive(Serialize)]
struct RerankRecord {
    user_id: usize,
    items: Vec<usize>,
    evaluator_score: f64,
}

pub struct RerankArgs<'a> {
    pub generator: &'a Path,
    pub evaluator: &'a Path,
    pub pools: &'a Path,
    pub world: Option<&'a Path>,
    pub mode: RerankMode,
    pub out: &'a Path,
    pub traces: Option<&'a Path>,
}

pub fn rerank(args: RerankArgs) -> Result<()> {
    let gen = load_generator(args.generator)?;
    let evaluator = load_evaluator(args.evaluator)?;
    if !same_architecture(&gen.config, &evaluator.config) {
        return Err(Failure::InvalidConfig("generator and evaluator checkpoints disagree on dimensions".into()).into());
    }
    let pools = load_pools(args.pools, gen.config.task.list_len)?;
    let world = load_world(args.world, args.pools, &gen.config)?;
    let seed = child_seed(gen.config.seed, streams::RERANK);
    let mut out = Vec::with_capacity(pools.len());
    let mut traces = Vec::new();
    for (j, pool) in pools.iter().enumerate() {
        let user = world.user(pool.user_id)?;
        let cands = world.items_of(&pool.candidates)?;
        let items = match args.mode {
            RerankMode::PassAt(k) => pass_at_k(&gen, &evaluator, &world, user, &cands, k, child_seed(seed, j as u64))?.best_list,
            mode => {
                let decode = if mode == RerankMode::Greedy { DecodeMode::Greedy } else { DecodeMode::Sample };
                let list = generate_list(&gen, user, &cands, decode, &mut child_rng(seed, j as u64))?;
                traces.push(list.trace);
                list.items
            }
        };
        let score = evaluator_score(&evaluator, user, &world.items_of(&items)?)?;
        out.push(RerankRecord {
            user_id: pool.user_id,
            items,
            evaluator_score: score,
        });
    }
    write_jsonl(args.out, &out)?;
    if let Some(path) = args.traces {
        if traces.is_empty() {
            bail!("traces are only recorded in greedy and sample modes");
        }
        write_traces(path, &gen.config, &traces)?;
    }
    let mean = out.iter().map(|r| r.evaluator_score).sum::<f64>() / out.len() as f64;
    eprintln!("{} lists, mean evaluator score {mean:.4}", out.len());
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub generator: &'a Path,
    pub evaluator: &'a Path,
    pub data: &'a Path,
    pub world: Option<&'a Path>,
    pub report: &'a Path,
    pub ks: &'a [usize],
    pub pass_k: Option<usize>,
}

/// Logged order versus generator orderings of the same logged items.
pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let gen = load_generator(args.generator)?;
    let evaluator = load_evaluator(args.evaluator)?;
    if !same_architecture(&gen.config, &evaluator.config) {
        return Err(Failure::InvalidConfig("generator and evaluator checkpoints disagree on dimensions".into()).into());
    }
    require_file(args.data)?;
    let records = read_interactions(args.data)?;
    if records.is_empty() {
        bail!("{} contains no interactions", args.data.display());
    }
    let k = gen.config.task.list_len;
    if let Some(r) = records.iter().find(|r| r.items.len() < k) {
        return Err(Failure::ListTooLong { k, m: r.items.len() }.into());
    }
    let world = load_world(args.world, args.data, &gen.config)?;
    let seed = child_seed(gen.config.seed, streams::RERANK);

    let logged: Vec<Vec<usize>> = records.iter().map(|r| r.items[..k].to_vec()).collect();
    let mut greedy = Vec::with_capacity(records.len());
    let mut best = Vec::new();
    for (j, r) in records.iter().enumerate() {
        let user = world.user(r.user_id)?;
        let cands = world.items_of(&r.items)?;
        greedy.push(generate_list(&gen, user, &cands, DecodeMode::Greedy, &mut child_rng(seed, j as u64))?.items);
        if let Some(kp) = args.pass_k {
            best.push(pass_at_k(&gen, &evaluator, &world, user, &cands, kp, child_seed(seed, j as u64))?.best_list);
        }
    }
    let mut reports = vec![
        ranking_report("logged", &evaluator, &world, &records, &logged, args.ks)?,
        ranking_report("generator", &evaluator, &world, &records, &greedy, args.ks)?,
    ];
    if let Some(kp) = args.pass_k {
        reports.push(ranking_report(&format!("generator_pass@{kp}"), &evaluator, &world, &records, &best, args.ks)?);
    }
    write_metric_reports(args.report, &reports)?;
    for r in &reports {
        eprintln!("{}: evaluator score {:.4}", r.name, r.metrics["evaluator_score"]);
    }
    Ok(())
}

pub struct ProbeArgs<'a> {
    pub generator: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub pools: &'a Path,
    pub world: Option<&'a Path>,
    pub report: &'a Path,
    pub traces: Option<&'a Path>,
    pub efficiency: Option<&'a Path>,
    pub limit: Option<usize>,
}

/// Sampled rollouts on each pool, summarised per list position. With both
/// a checkpoint and a config, the config's reasoning section replaces the
/// checkpoint's.
pub fn probe_entropy(args: ProbeArgs) -> Result<()> {
    let gen = match (args.generator, args.config) {
        (Some(g), None) => load_generator(g)?,
        (Some(g), Some(c)) => {
            let mut gen = load_generator(g)?;
            gen.config.reasoning = load_config(Some(c))?.reasoning;
            check_config(&gen.config)?;
            gen
        }
        (None, c) => {
            let cfg = load_config(c)?;
            GeneratorModel::standalone(&cfg, child_seed(cfg.seed, streams::GENERATOR_INIT))?
        }
    };
    let mut pools = load_pools(args.pools, gen.config.task.list_len)?;
    if let Some(n) = args.limit {
        pools.truncate(n.max(1));
    }
    let world = load_world(args.world, args.pools, &gen.config)?;
    let seed = child_seed(gen.config.seed, streams::RERANK);
    let mut traces: Vec<GenerationTrace> = Vec::with_capacity(pools.len());
    let mut times = Vec::with_capacity(pools.len());
    for (j, pool) in pools.iter().enumerate() {
        let user = world.user(pool.user_id)?;
        let cands = world.items_of(&pool.candidates)?;
        let start = Instant::now();
        let list = generate_list(&gen, user, &cands, DecodeMode::Sample, &mut child_rng(seed, j as u64))?;
        times.push(start.elapsed().as_secs_f64());
        traces.push(list.trace);
    }
    let profile = entropy_profile(&traces)?;
    write_entropy_profile(args.report, &profile)?;
    if let Some(path) = args.traces {
        write_traces(path, &gen.config, &traces)?;
    }
    if let Some(path) = args.efficiency {
        let row = efficiency_report(gen.config.reasoning.max_reasoning_steps, &traces, &times)?;
        write_efficiency_report(path, &[row])?;
    }
    let triggered: usize = profile.triggered.iter().sum();
    eprintln!(
        "{} lists, {} positions, {triggered} reasoning-triggered selections",
        traces.len(),
        profile.before.len()
    );
    Ok(())
}
