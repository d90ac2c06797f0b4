use eglr::config::ExperimentConfig;
use eglr::evaluator::{pretrain_evaluator, EvaluatorModel};
use eglr::generator::{generate_list, DecodeMode, GeneratorModel};
use eglr::metrics::ranking_report;
use eglr::rng::child_rng;
use eglr::sim::{generate_experiment, read_interactions, read_pools, read_world, write_jsonl, write_world};
use eglr::training::train_generator;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.world.users = 20;
    cfg.world.items = 80;
    cfg.world.category_bits = 2;
    cfg.task.list_len = 3;
    cfg.task.pool_size = 6;
    cfg.task.n_lists = 150;
    cfg.task.n_pools = 10;
    cfg.task.n_test_pools = 5;
    cfg.model.embed_dim = 4;
    cfg.model.hidden = 16;
    cfg.model.heads = 2;
    cfg.model.eval_layers = 1;
    cfg.optim.batch_size = 32;
    cfg
}

struct Run {
    evaluator: EvaluatorModel,
    generator: GeneratorModel,
    rewards: Vec<f64>,
}

fn run(cfg: &ExperimentConfig) -> Run {
    let exp = generate_experiment(cfg).unwrap();
    let mut evaluator = EvaluatorModel::new(cfg).unwrap();
    pretrain_evaluator(&mut evaluator, &exp.world, &exp.train, 2).unwrap();
    let mut generator = GeneratorModel::new(cfg, &evaluator.params).unwrap();
    let log = train_generator(&mut generator, &evaluator, &exp.world, &exp.pools, 10, 99).unwrap();
    Run {
        evaluator,
        generator,
        rewards: log.iter().map(|r| r.mean_reward).collect(),
    }
}

#[test]
fn two_stage_training_is_reproducible() {
    let cfg = small();
    let a = run(&cfg);
    let b = run(&cfg);
    assert!(a.evaluator.params.values_equal(&b.evaluator.params));
    assert!(a.generator.params.values_equal(&b.generator.params));
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.rewards.len(), 10);
    assert!(a.rewards.iter().all(|r| r.is_finite() && *r >= 0.0));
}

#[test]
fn files_round_trip_and_generated_lists_are_reportable() {
    let cfg = small();
    let exp = generate_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_world(&dir.path().join("world.json"), &exp.world).unwrap();
    write_jsonl(&dir.path().join("test.jsonl"), &exp.test).unwrap();
    write_jsonl(&dir.path().join("pools.jsonl"), &exp.pools).unwrap();
    let world = read_world(&dir.path().join("world.json")).unwrap();
    let test = read_interactions(&dir.path().join("test.jsonl")).unwrap();
    assert_eq!(world, exp.world);
    assert_eq!(test, exp.test);
    assert_eq!(read_pools(&dir.path().join("pools.jsonl")).unwrap(), exp.pools);

    let evaluator = EvaluatorModel::new(&cfg).unwrap();
    let generator = GeneratorModel::new(&cfg, &evaluator.params).unwrap();
    let rankings: Vec<Vec<usize>> = test
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let items = world.items_of(&r.items).unwrap();
            let user = world.user(r.user_id).unwrap();
            generate_list(&generator, user, &items, DecodeMode::Greedy, &mut child_rng(0, j as u64))
                .unwrap()
                .items
        })
        .collect();
    let report = ranking_report("generator", &evaluator, &world, &test, &rankings, &[1, 3, 10]).unwrap();
    assert_eq!(report.lists, test.len());
    let keys: Vec<&str> = report.metrics.keys().map(String::as_str).collect();
    assert_eq!(keys, ["evaluator_score", "map@1", "map@3", "ndcg@1", "ndcg@3"]);
    for (k, v) in &report.metrics {
        assert!(v.is_finite() && *v >= 0.0, "{k} = {v}");
        if k != "evaluator_score" {
            assert!(*v <= 1.0, "{k} = {v}");
        }
    }
}
