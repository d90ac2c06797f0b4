//! The dual-head list evaluator.
//!
//! Input rows are `[e_cls; E_joint + P]` where `E_joint` concatenates item
//! and user field embeddings and `P` is the sinusoidal position table. The
//! shared refine MLP is added to item rows as a residual, a bidirectional
//! encoder runs over the `K + 1` rows, and two sigmoid heads read the item
//! rows (per-item click) and the cls row (list utility).

mod features;

pub(crate) use features::{init_shared, SharedVars};
pub use features::SHARED_PREFIX;

use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::{self, ModelKind};
use crate::config::ExperimentConfig;
use crate::error::{arg_err, Error, Result};
use crate::nn::layers::{bind, init_linear, init_transformer_layer, Binding, Linear, TransformerLayer};
use crate::nn::{sinusoidal_position_encoding, ParameterSet, Tape, Tensor, Var};
use crate::rng::{child_rng, child_seed, streams};
use crate::sim::{InteractionRecord, Item, UserProfile, World};
use crate::training::{AdamConfig, OptimizerState};

pub const EVAL_PREFIX: &str = "eval.";

/// Prediction clamp used inside both losses.
pub const PRED_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorModel {
    pub config: ExperimentConfig,
    pub params: ParameterSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorOutput {
    pub y_point_hat: Vec<f64>,
    pub y_cls_hat: f64,
}

/// Mean losses of one pass over a record set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLosses {
    pub point: f64,
    pub list: f64,
}

impl EvalLosses {
    pub fn total(&self) -> f64 {
        self.point + self.list
    }
}

impl EvaluatorModel {
    /// Fresh weights drawn from the evaluator stream of `config.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Self::with_seed(config, child_seed(config.seed, streams::EVALUATOR_INIT))
    }

    pub fn with_seed(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut params = ParameterSet::new();
        init_shared(&mut params, config, &mut rng)?;
        let d = config.model.width();
        params.insert("eval.cls", Tensor::uniform_fan_in(&[1, d], d, &mut rng))?;
        for l in 0..config.model.eval_layers {
            init_transformer_layer(&mut params, &format!("eval.enc.{l}"), d, &mut rng)?;
        }
        init_linear(&mut params, "eval.head_point", d, 1, &mut rng)?;
        init_linear(&mut params, "eval.head_list", d, 1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Evaluator, &self.config, &self.params)
    }

    /// Loads a checkpoint and checks it against the architecture its own
    /// config describes.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        if ck.kind != ModelKind::Evaluator {
            return Err(Error::Checkpoint(format!("{} is not an evaluator checkpoint", path.display())));
        }
        let reference = Self::with_seed(&ck.config, 0)?;
        checkpoint::check_compatible(&ck.params, &reference.params)?;
        Ok(Self {
            config: ck.config,
            params: ck.params,
        })
    }

    pub fn forward(&self, user: &UserProfile, items: &[&Item]) -> Result<EvaluatorOutput> {
        let mut out = self.forward_batch(&[(user, items.to_vec())])?;
        Ok(out.remove(0))
    }

    /// Scores several lists of equal length in one pass.
    pub fn forward_batch(&self, lists: &[(&UserProfile, Vec<&Item>)]) -> Result<Vec<EvaluatorOutput>> {
        let mut tape = Tape::new();
        let g = forward_graph(&mut tape, &self.params, &self.config, Binding::Frozen, lists)?;
        let point = tape.data(g.point);
        let cls = tape.data(g.cls);
        Ok(cls
            .iter()
            .enumerate()
            .map(|(b, &c)| EvaluatorOutput {
                y_point_hat: point[b * g.k..(b + 1) * g.k].to_vec(),
                y_cls_hat: c,
            })
            .collect())
    }
}

/// Encoder input `[e_cls; E_joint + P]`, `(K+1) × d`.
pub fn build_eval_input(model: &EvaluatorModel, user: &UserProfile, items: &[&Item]) -> Result<Tensor> {
    if items.is_empty() {
        return arg_err("evaluator needs a list of at least one item");
    }
    let mut tape = Tape::new();
    let shared = SharedVars::bind(&mut tape, &model.params, Binding::Frozen)?;
    let pairs: Vec<(&UserProfile, &Item)> = items.iter().map(|&i| (user, i)).collect();
    let joint = shared.joint(&mut tape, &pairs)?;
    let d = tape.value(joint).dims2()?.1;
    let pos = tape.constant(sinusoidal_position_encoding(items.len(), d)?);
    let rows = tape.add(joint, pos)?;
    let cls = tape.frozen(&model.params, "eval.cls")?;
    let seq = tape.concat_rows(&[cls, rows])?;
    Ok(tape.value(seq).clone())
}

pub fn evaluator_forward(model: &EvaluatorModel, user: &UserProfile, items: &[&Item]) -> Result<EvaluatorOutput> {
    model.forward(user, items)
}

/// Head outputs of a batch on a tape: `point` is `B·K × 1`, `cls` is `B × 1`.
pub(crate) struct EvalGraph {
    pub point: Var,
    pub cls: Var,
    pub k: usize,
}

pub(crate) fn forward_graph(
    tape: &mut Tape,
    params: &ParameterSet,
    config: &ExperimentConfig,
    binding: Binding,
    lists: &[(&UserProfile, Vec<&Item>)],
) -> Result<EvalGraph> {
    let Some(first) = lists.first() else {
        return arg_err("empty evaluator batch");
    };
    let k = first.1.len();
    if k == 0 {
        return arg_err("evaluator needs a list of at least one item");
    }
    if lists.iter().any(|(_, l)| l.len() != k) {
        return arg_err("evaluator batch lists must share one length");
    }
    let b = lists.len();
    let d = config.model.width();

    let shared = SharedVars::bind(tape, params, binding)?;
    let pairs: Vec<(&UserProfile, &Item)> = lists
        .iter()
        .flat_map(|(u, l)| l.iter().map(move |&i| (*u, i)))
        .collect();
    let joint = shared.joint(tape, &pairs)?;
    let refined = shared.refine(tape, joint)?;
    let pe = sinusoidal_position_encoding(k, d)?;
    let tiled: Vec<f64> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
    let pos = tape.constant(Tensor::matrix(b * k, d, tiled)?);
    let items = tape.add(joint, pos)?;
    let items = tape.add(items, refined)?;

    let cls = bind(tape, params, "eval.cls", binding)?;
    let stacked = tape.concat_rows(&[cls, items])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|s| std::iter::once(0).chain((0..k).map(move |j| 1 + s * k + j)))
        .collect();
    let mut seq = tape.gather_rows(stacked, &order)?;
    for l in 0..config.model.eval_layers {
        let layer = TransformerLayer::bind(tape, params, &format!("eval.enc.{l}"), binding)?;
        seq = layer.encoder_forward(tape, seq, config.model.heads, b)?;
    }

    let item_rows: Vec<usize> = (0..b).flat_map(|s| (0..k).map(move |j| s * (k + 1) + 1 + j)).collect();
    let cls_rows: Vec<usize> = (0..b).map(|s| s * (k + 1)).collect();
    let item_out = tape.gather_rows(seq, &item_rows)?;
    let cls_out = tape.gather_rows(seq, &cls_rows)?;
    let head_point = Linear::bind(tape, params, "eval.head_point", binding)?;
    let head_list = Linear::bind(tape, params, "eval.head_list", binding)?;
    let point = head_point.forward(tape, item_out)?;
    let point = tape.sigmoid(point)?;
    let cls = head_list.forward(tape, cls_out)?;
    let cls = tape.sigmoid(cls)?;
    Ok(EvalGraph { point, cls, k })
}

fn check_labels(y_point: &[u8]) -> Result<()> {
    if y_point.iter().any(|&y| y > 1) {
        return arg_err("point labels must be 0 or 1");
    }
    Ok(())
}

/// Mean binary cross-entropy over the list, predictions clamped to
/// `[ε, 1 − ε]`.
pub fn loss_point(y_point_hat: &[f64], y_point: &[u8]) -> Result<f64> {
    if y_point_hat.len() != y_point.len() || y_point.is_empty() {
        return arg_err(format!(
            "loss_point needs equal non-empty lengths, got {} predictions and {} labels",
            y_point_hat.len(),
            y_point.len()
        ));
    }
    check_labels(y_point)?;
    let total: f64 = y_point_hat
        .iter()
        .zip(y_point)
        .map(|(&p, &y)| {
            let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-total / y_point.len() as f64)
}

/// Weighted log-regression loss `−(y·log ŷ + log(1 − ŷ))`, minimised at
/// `ŷ = y / (y + 1)`.
pub fn loss_list(y_cls_hat: f64, y_list: f64) -> Result<f64> {
    if !(y_list >= 0.0) || !y_list.is_finite() {
        return arg_err(format!("list utility must be a finite non-negative number, got {y_list}"));
    }
    let p = y_cls_hat.clamp(PRED_EPS, 1.0 - PRED_EPS);
    Ok(-(y_list * p.ln() + (1.0 - p).ln()))
}

pub fn loss_eval(out: &EvaluatorOutput, y_point: &[u8], y_list: f64) -> Result<f64> {
    Ok(loss_point(&out.y_point_hat, y_point)? + loss_list(out.y_cls_hat, y_list)?)
}

/// Batch-mean `L_point + L_list` on the tape. Returns `(total, point, list)`.
pub(crate) fn loss_graph(tape: &mut Tape, g: &EvalGraph, records: &[&InteractionRecord]) -> Result<(Var, Var, Var)> {
    let b = records.len();
    let mut labels = Vec::with_capacity(b * g.k);
    let mut utilities = Vec::with_capacity(b);
    for r in records {
        if r.y_point.len() != g.k {
            return arg_err("record label count differs from list length");
        }
        check_labels(&r.y_point)?;
        if !(r.y_list >= 0.0) || !r.y_list.is_finite() {
            return arg_err(format!("negative or non-finite list utility {}", r.y_list));
        }
        labels.extend(r.y_point.iter().map(|&y| f64::from(y)));
        utilities.push(r.y_list);
    }
    let y = tape.constant(Tensor::matrix(b * g.k, 1, labels.clone())?);
    let not_y = tape.constant(Tensor::matrix(b * g.k, 1, labels.iter().map(|y| 1.0 - y).collect())?);
    let p = tape.clamp(g.point, PRED_EPS, 1.0 - PRED_EPS)?;
    let log_p = tape.log(p)?;
    let neg = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(y, log_p)?;
    let c = tape.mul(not_y, log_q)?;
    let s = tape.add(a, c)?;
    let s = tape.sum(s)?;
    let point = tape.scale(s, -1.0 / (b * g.k) as f64)?;

    let w = tape.constant(Tensor::matrix(b, 1, utilities)?);
    let pc = tape.clamp(g.cls, PRED_EPS, 1.0 - PRED_EPS)?;
    let log_c = tape.log(pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_qc = tape.log(one_minus)?;
    let wl = tape.mul(w, log_c)?;
    let s = tape.add(wl, log_qc)?;
    let s = tape.sum(s)?;
    let list = tape.scale(s, -1.0 / b as f64)?;

    let total = tape.add(point, list)?;
    Ok((total, point, list))
}

fn resolve<'w>(world: &'w World, r: &InteractionRecord) -> Result<(&'w UserProfile, Vec<&'w Item>)> {
    Ok((world.user(r.user_id)?, world.items_of(&r.items)?))
}

/// Batch-mean `L_point + L_list` of `records` as a tape variable.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ParameterSet,
    config: &ExperimentConfig,
    binding: Binding,
    world: &World,
    records: &[&InteractionRecord],
) -> Result<Var> {
    let lists = records.iter().map(|r| resolve(world, r)).collect::<Result<Vec<_>>>()?;
    let g = forward_graph(tape, params, config, binding, &lists)?;
    Ok(loss_graph(tape, &g, records)?.0)
}

/// Mini-batch Adam over `L_point + L_list`. Keeps its optimizer state
/// across epochs.
pub struct EvaluatorTrainer {
    opt: OptimizerState,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
}

impl EvaluatorTrainer {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            opt: OptimizerState::new(AdamConfig::from(&config.optim)),
            batch_size: config.optim.batch_size.max(1),
            shuffle_seed: child_seed(config.seed, streams::EVALUATOR_SHUFFLE),
            epoch: 0,
        }
    }

    /// One shuffled pass; returns the record-weighted mean losses.
    pub fn run_epoch(&mut self, model: &mut EvaluatorModel, world: &World, records: &[InteractionRecord]) -> Result<EvalLosses> {
        if records.is_empty() {
            return arg_err("cannot train the evaluator on an empty dataset");
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut child_rng(self.shuffle_seed, self.epoch));
        self.epoch += 1;
        let mut sum_point = 0.0;
        let mut sum_list = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<&InteractionRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let lists = batch.iter().map(|r| resolve(world, r)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let g = forward_graph(&mut tape, &model.params, &model.config, Binding::Trainable, &lists)?;
            let (total, point, list) = loss_graph(&mut tape, &g, &batch)?;
            sum_point += tape.scalar(point) * batch.len() as f64;
            sum_list += tape.scalar(list) * batch.len() as f64;
            let grads = tape.backward(total)?;
            self.opt.step(&mut model.params, &grads)?;
        }
        let n = records.len() as f64;
        Ok(EvalLosses {
            point: sum_point / n,
            list: sum_list / n,
        })
    }
}

/// Trains for `epochs` passes and returns the per-epoch mean losses.
pub fn pretrain_evaluator(
    model: &mut EvaluatorModel,
    world: &World,
    records: &[InteractionRecord],
    epochs: usize,
) -> Result<Vec<EvalLosses>> {
    if records.is_empty() {
        return arg_err("cannot train the evaluator on an empty dataset");
    }
    let mut trainer = EvaluatorTrainer::new(&model.config);
    (0..epochs).map(|_| trainer.run_epoch(model, world, records)).collect()
}

/// Mean losses of the current model on `records`, without updating it.
pub fn evaluate_losses(model: &EvaluatorModel, world: &World, records: &[InteractionRecord]) -> Result<EvalLosses> {
    if records.is_empty() {
        return arg_err("no records to evaluate");
    }
    let mut sum_point = 0.0;
    let mut sum_list = 0.0;
    for chunk in records.chunks(model.config.optim.batch_size.max(1)) {
        let lists = chunk.iter().map(|r| resolve(world, r)).collect::<Result<Vec<_>>>()?;
        for (out, r) in model.forward_batch(&lists)?.iter().zip(chunk) {
            sum_point += loss_point(&out.y_point_hat, &r.y_point)?;
            sum_list += loss_list(out.y_cls_hat, r.y_list)?;
        }
    }
    let n = records.len() as f64;
    Ok(EvalLosses {
        point: sum_point / n,
        list: sum_list / n,
    })
}

/// Positive rate of `train` and the mean point loss of predicting it as a
/// constant on `test`.
pub fn base_rate_loss(train: &[InteractionRecord], test: &[InteractionRecord]) -> Result<(f64, f64)> {
    let (pos, n) = train.iter().fold((0usize, 0usize), |(p, n), r| {
        (p + r.y_point.iter().filter(|&&y| y == 1).count(), n + r.y_point.len())
    });
    if n == 0 || test.is_empty() {
        return arg_err("base rate needs non-empty train and test sets");
    }
    let rate = pos as f64 / n as f64;
    let mut total = 0.0;
    for r in test {
        total += loss_point(&vec![rate; r.y_point.len()], &r.y_point)?;
    }
    Ok((rate, total / test.len() as f64))
}
