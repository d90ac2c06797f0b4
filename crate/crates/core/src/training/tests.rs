use proptest::prelude::*;

use super::*;
use crate::config::{tiny_config, RewardMode};
use crate::evaluator::EvaluatorOutput;
use crate::generator::{replay, PoolEncoding};
use crate::nn::gradient_check;
use crate::sim::{generate_world, sample_pools};

/// Direct DCG oracle over 1-based positions.
fn dcg_oracle(y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, v) in y.iter().enumerate() {
        let pos = (i + 1) as f64;
        total += (2f64.powf(*v) - 1.0) / (pos + 1.0).log2();
    }
    total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn dcg_examples() {
    assert_eq!(reward_dcg(&[0.0; 5]).unwrap(), 0.0);
    assert!((reward_dcg(&[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((reward_dcg(&[1.0, 1.0, 1.0]).unwrap() - 2.130930).abs() < 1e-6);
    assert!(reward_dcg(&[0.5, 1.2]).is_err());
    assert!(reward_dcg(&[-0.1]).is_err());
}

#[test]
fn listwise_is_identity() {
    assert_eq!(reward_listwise(0.5).unwrap(), 0.5);
    assert_eq!(reward_listwise(0.9).unwrap(), 0.9);
    assert!(reward_listwise(0.3).unwrap() < reward_listwise(0.31).unwrap());
    assert!(reward_listwise(1.5).is_err());
    let out = EvaluatorOutput {
        y_point_hat: vec![1.0, 0.0],
        y_cls_hat: 0.25,
    };
    assert_eq!(reward(RewardMode::Listwise, &out).unwrap(), 0.25);
    assert_eq!(reward(RewardMode::Dcg, &out).unwrap(), 1.0);
}

#[test]
fn advantage_examples() {
    assert_eq!(group_advantages(&[0.1, 0.1, 0.1]), vec![0.0; 3]);
    assert_eq!(group_advantages(&[3.7]), vec![0.0]);
    let a = group_advantages(&[1.0, 2.0, 3.0, 4.0]);
    let want = [-1.341640, -0.447214, 0.447214, 1.341640];
    for (x, y) in a.iter().zip(want) {
        assert!((x - y).abs() < 1e-5, "{a:?}");
    }
}

proptest! {
    #[test]
    fn advantages_are_standardised(r in prop::collection::vec(0.0f64..5.0, 1..12)) {
        let a = group_advantages(&r);
        let n = r.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        prop_assert!(mean_a.abs() <= 1e-9);
        let mean_r = r.iter().sum::<f64>() / n;
        let std_r = (r.iter().map(|x| (x - mean_r).powi(2)).sum::<f64>() / n).sqrt();
        let std_a = (a.iter().map(|x| (x - mean_a).powi(2)).sum::<f64>() / n).sqrt();
        // The +1e-8 guard shrinks the std by 1e-8/std_r, so the 1e-5 bound
        // holds from std_r >= 1e-3.
        if std_r >= 1e-3 {
            prop_assert!((std_a - 1.0).abs() <= 1e-5, "{std_a}");
        }
    }

    #[test]
    fn dcg_matches_oracle_and_sorted_order_is_best(y in prop::collection::vec(0.0f64..=1.0, 1..=5)) {
        let got = reward_dcg(&y).unwrap();
        prop_assert!((got - dcg_oracle(&y)).abs() <= 1e-12);
        let mut sorted = y.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let best = reward_dcg(&sorted).unwrap();
        for p in permutations(y.len()) {
            let perm: Vec<f64> = p.iter().map(|&i| y[i]).collect();
            prop_assert!(reward_dcg(&perm).unwrap() <= best + 1e-12);
        }
    }

    #[test]
    fn dcg_strictly_increasing_in_each_score(y in prop::collection::vec(0.0f64..0.9, 1..=6), k in 0usize..6, d in 0.001f64..0.1) {
        let k = k % y.len();
        let mut up = y.clone();
        up[k] += d;
        prop_assert!(reward_dcg(&up).unwrap() > reward_dcg(&y).unwrap());
    }
}

struct Toy {
    gen: GeneratorModel,
    pool: PoolEncoding,
    lists: Vec<Vec<usize>>,
    rewards: Vec<f64>,
}

/// M = 4, K = 2, G = 2 with reasoning enabled and fixed sampled actions.
fn toy() -> Toy {
    let mut cfg = tiny_config();
    cfg.task.list_len = 2;
    cfg.task.pool_size = 4;
    cfg.reasoning.entropy_threshold = 0.0;
    let world = generate_world(&cfg.world, 2).unwrap();
    let gen = GeneratorModel::standalone(&cfg, 6).unwrap();
    let user = world.user(1).unwrap();
    let pool = crate::generator::encode_pool(&gen, user, &world.items_of(&[3, 8, 1, 6]).unwrap()).unwrap();
    // One sampled rollout plus a second, different fixed action sequence.
    let mut tape = Tape::new();
    let first = rollout(&mut tape, &gen, &pool, Binding::Frozen, DecodeMode::Sample, &mut child_rng(10, 0))
        .unwrap()
        .items;
    let second: Vec<usize> = [8, 6, 3, 1].into_iter().filter(|i| !first.contains(i)).take(2).collect();
    let lists = vec![first, second];
    Toy {
        gen,
        pool,
        lists,
        rewards: vec![0.4, 1.3],
    }
}

fn toy_loss(tape: &mut Tape, t: &Toy, gen: &GeneratorModel, rewards: &[f64]) -> crate::Result<Var> {
    let rollouts = t
        .lists
        .iter()
        .map(|l| replay(tape, gen, &t.pool, Binding::Trainable, l))
        .collect::<crate::Result<Vec<_>>>()?;
    let group = GroupSample::new(rollouts, rewards.to_vec())?;
    grpo_loss(tape, &group)
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let t = toy();
    let err = gradient_check(&t.gen.decoder_params(), 1e-6, |tape, p| {
        let mut g = t.gen.clone();
        g.params.merge_from(p);
        toy_loss(tape, &t, &g, &t.rewards)
    })
    .unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn equal_rewards_give_zero_loss_and_gradient() {
    let t = toy();
    let mut tape = Tape::new();
    let loss = toy_loss(&mut tape, &t, &t.gen, &[0.7, 0.7]).unwrap();
    assert_eq!(tape.scalar(loss), 0.0);
    assert_eq!(tape.backward(loss).unwrap().max_abs(), 0.0);

    let mut tape = Tape::new();
    let empty = GroupSample {
        rollouts: vec![],
        rewards: vec![],
        advantages: vec![],
    };
    assert!(grpo_loss(&mut tape, &empty).is_err());
}

#[test]
fn best_rollout_is_pushed_up() {
    let t = toy();
    let mut tape = Tape::new();
    let loss = toy_loss(&mut tape, &t, &t.gen, &t.rewards).unwrap();
    let grads = tape.backward(loss).unwrap();
    // A small step against the gradient raises the log-prob of the
    // higher-reward rollout relative to the other.
    let mut stepped = t.gen.clone();
    for (name, g) in grads.iter() {
        for (w, gi) in stepped.params.get_mut(name).unwrap().data_mut().iter_mut().zip(g) {
            *w -= 1e-3 * gi;
        }
    }
    let lp = |gen: &GeneratorModel, i: usize| {
        let mut tape = Tape::new();
        replay(&mut tape, gen, &t.pool, Binding::Frozen, &t.lists[i]).unwrap().logprob_sum
    };
    let before = lp(&t.gen, 1) - lp(&t.gen, 0);
    let after = lp(&stepped, 1) - lp(&stepped, 0);
    assert!(after > before, "{before} -> {after}");
    assert!(group_advantages(&t.rewards)[1] > 0.0);
}

fn training_setup() -> (GeneratorModel, EvaluatorModel, World, Vec<CandidatePoolRecord>) {
    let cfg = tiny_config();
    let world = generate_world(&cfg.world, 3).unwrap();
    let eval = EvaluatorModel::new(&cfg).unwrap();
    let gen = GeneratorModel::new(&cfg, &eval.params).unwrap();
    let pools = sample_pools(&world, 6, cfg.task.pool_size, 4).unwrap();
    (gen, eval, world, pools)
}

#[test]
fn zero_iterations_leave_generator_unchanged() {
    let (mut gen, eval, world, pools) = training_setup();
    let before = gen.clone();
    assert!(train_generator(&mut gen, &eval, &world, &pools, 0, 1).unwrap().is_empty());
    assert!(gen.params.values_equal(&before.params));
    assert!(train_generator(&mut gen, &eval, &world, &[], 3, 1).is_err());
}

#[test]
fn training_respects_freeze_and_is_deterministic() {
    let (gen0, eval, world, pools) = training_setup();
    let mut a = gen0.clone();
    let mut b = gen0.clone();
    let log_a = train_generator(&mut a, &eval, &world, &pools, 12, 9).unwrap();
    let log_b = train_generator(&mut b, &eval, &world, &pools, 12, 9).unwrap();
    assert_eq!(log_a, log_b);
    assert!(a.params.values_equal(&b.params));

    assert!(a.shared_params().values_equal(&gen0.shared_params()));
    assert!(a.shared_params().values_equal(&eval.params.with_prefix(crate::evaluator::SHARED_PREFIX)));
    assert!(!a.decoder_params().values_equal(&gen0.decoder_params()));

    assert_eq!(log_a.len(), 12);
    for (i, row) in log_a.iter().enumerate() {
        assert_eq!(row.iteration, i);
        assert!(row.mean_reward >= 0.0 && row.std_reward >= 0.0);
        assert!(row.reason_steps_per_list <= (gen0.config.task.list_len * gen0.config.reasoning.max_reasoning_steps) as f64);
    }
}

#[test]
fn training_log_csv_columns() {
    let (mut gen, eval, world, pools) = training_setup();
    let log = train_generator(&mut gen, &eval, &world, &pools, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_training_log(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,mean_reward,std_reward,mean_entropy,reason_steps_per_list,loss"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn window_mean_clamps() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(window_mean(&v, 0, 2), 1.5);
    assert_eq!(window_mean(&v, 2, 100), 3.5);
    assert!(window_mean(&v, 5, 6).is_nan());
}

