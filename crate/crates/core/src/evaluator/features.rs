//! Categorical feature embeddings and the refine MLP, shared by the
//! evaluator and the generator.

use rand::Rng;

use crate::config::{ExperimentConfig, ITEM_FIELDS, USER_FIELDS};
use crate::error::{Error, Result};
use crate::nn::layers::{bind, init_linear, Binding, Linear};
use crate::nn::{ParameterSet, Tape, Tensor, Var};
use crate::sim::{Item, UserProfile};

pub const SHARED_PREFIX: &str = "shared.";

fn item_table(f: usize) -> String {
    format!("shared.item_emb.{f}")
}

fn user_table(f: usize) -> String {
    format!("shared.user_emb.{f}")
}

pub(crate) fn init_shared<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<()> {
    let e = config.model.embed_dim;
    for (f, &vocab) in config.world.item_vocab().iter().enumerate() {
        params.insert(item_table(f), Tensor::uniform_fan_in(&[vocab, e], e, rng))?;
    }
    for (f, &vocab) in config.world.user_vocab().iter().enumerate() {
        params.insert(user_table(f), Tensor::uniform_fan_in(&[vocab, e], e, rng))?;
    }
    let d = config.model.width();
    init_linear(params, "shared.refine", d, d, rng)
}

/// Shared parameters bound onto a tape.
#[derive(Debug, Clone)]
pub(crate) struct SharedVars {
    item_tables: Vec<(Var, usize)>,
    user_tables: Vec<(Var, usize)>,
    refine: Linear,
}

impl SharedVars {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, binding: Binding) -> Result<Self> {
        let mut item_tables = Vec::with_capacity(ITEM_FIELDS);
        for f in 0..ITEM_FIELDS {
            let name = item_table(f);
            let vocab = params.get(&name)?.shape()[0];
            item_tables.push((bind(tape, params, &name, binding)?, vocab));
        }
        let mut user_tables = Vec::with_capacity(USER_FIELDS);
        for f in 0..USER_FIELDS {
            let name = user_table(f);
            let vocab = params.get(&name)?.shape()[0];
            user_tables.push((bind(tape, params, &name, binding)?, vocab));
        }
        Ok(Self {
            item_tables,
            user_tables,
            refine: Linear::bind(tape, params, "shared.refine", binding)?,
        })
    }

    /// Joint rows `e_item ⊕ e_user`, one per `(user, item)` pair.
    pub fn joint(&self, tape: &mut Tape, pairs: &[(&UserProfile, &Item)]) -> Result<Var> {
        let mut cols = Vec::with_capacity(ITEM_FIELDS + USER_FIELDS);
        for (f, &(table, vocab)) in self.item_tables.iter().enumerate() {
            let ids = lookup_ids(pairs.iter().map(|(_, i)| i.feature_ids.get(f).copied()), vocab, "item", f)?;
            cols.push(tape.gather_rows(table, &ids)?);
        }
        for (f, &(table, vocab)) in self.user_tables.iter().enumerate() {
            let ids = lookup_ids(pairs.iter().map(|(u, _)| u.feature_ids.get(f).copied()), vocab, "user", f)?;
            cols.push(tape.gather_rows(table, &ids)?);
        }
        tape.concat_cols(&cols)
    }

    /// `ReLU(x W + b)`.
    pub fn refine(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.refine.forward(tape, x)?;
        tape.relu(y)
    }
}

fn lookup_ids(
    ids: impl Iterator<Item = Option<usize>>,
    vocab: usize,
    entity: &str,
    field: usize,
) -> Result<Vec<usize>> {
    ids.map(|id| match id {
        Some(id) if id < vocab => Ok(id),
        Some(id) => Err(Error::Vocabulary {
            field: format!("{entity} field {field}"),
            id,
            size: vocab,
        }),
        None => Err(Error::Argument(format!("{entity} is missing feature field {field}"))),
    })
    .collect()
}
