use rand::Rng;

use super::{
    argmax, effective_temperature, sample_index, selection_log_probs, selection_probs, DecodeMode, GeneratedList,
    GenerationTrace, GeneratorModel, PoolEncoding, Stage, StepKind, StepRecord, DECODER_LAYER,
};
use crate::error::{Error, Result};
use crate::nn::layers::{Binding, KvCache, TransformerLayer};
use crate::nn::{entropy, sinusoidal_position_encoding, Tape, Tensor, Var};

/// A finished rollout. `logprob_var` is the differentiable `Σ log p_sel`
/// on the tape the rollout ran on; it is `None` when every selection was
/// forced.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub items: Vec<usize>,
    pub trace: GenerationTrace,
    pub logprob_sum: f64,
    pub logprob_var: Option<Var>,
}

impl Rollout {
    pub fn into_list(self) -> GeneratedList {
        GeneratedList {
            items: self.items,
            trace: self.trace,
            logprob_sum: self.logprob_sum,
        }
    }
}

/// Decoding state of one rollout, living on a tape.
pub struct DecoderState<'t> {
    tape: &'t mut Tape,
    layer: TransformerLayer,
    heads: usize,
    use_cache: bool,
    e_refine: Var,
    positions: Tensor,
    inputs: Vec<Var>,
    cache: KvCache,
    z: Var,
    /// Row indices into the pool encoding, ascending (so ascending id).
    pub remaining: Vec<usize>,
    pub rea_cnt: usize,
    pub selected: Vec<usize>,
    pub logprob_sum: f64,
    logprob_var: Option<Var>,
}

impl<'t> DecoderState<'t> {
    pub fn new(tape: &'t mut Tape, model: &GeneratorModel, pool: &PoolEncoding, binding: Binding) -> Result<Self> {
        let cfg = &model.config;
        let layer = TransformerLayer::bind(tape, &model.params, DECODER_LAYER, binding)?;
        let e_refine = tape.constant(pool.e_refine.clone());
        let max_len = 1 + cfg.task.list_len * (cfg.reasoning.max_reasoning_steps + 1);
        let positions = sinusoidal_position_encoding(max_len, cfg.model.width())?;
        let c_gen = tape.constant(Tensor::row(pool.c_gen.clone())?);
        let mut state = Self {
            layer,
            heads: cfg.model.heads,
            use_cache: cfg.reasoning.kv_cache,
            e_refine,
            positions,
            inputs: Vec::new(),
            cache: KvCache::default(),
            z: c_gen,
            remaining: (0..pool.len()).collect(),
            rea_cnt: 0,
            selected: Vec::new(),
            logprob_sum: 0.0,
            logprob_var: None,
            tape,
        };
        state.push(c_gen)?;
        Ok(state)
    }

    /// Sequence length `|S|`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Decoder output for the newest token of `S`.
    pub fn z(&self) -> &[f64] {
        self.tape.data(self.z)
    }

    /// Appends a token to `S` (adding its position encoding) and decodes it.
    fn push(&mut self, token: Var) -> Result<()> {
        let t = self.inputs.len();
        if t >= self.positions.shape()[0] {
            return Err(Error::State("decoder sequence exceeds its reasoning budget".into()));
        }
        let pos = self.tape.constant(Tensor::row(self.positions.row_slice(t).to_vec())?);
        let input = self.tape.add(token, pos)?;
        self.inputs.push(input);
        self.z = if self.use_cache {
            self.layer.decoder_step(self.tape, input, &mut self.cache, self.heads)?
        } else {
            let seq = self.tape.concat_rows(&self.inputs)?;
            let out = self.layer.decoder_forward(self.tape, seq, self.heads, 1)?;
            self.tape.gather_rows(out, &[t])?
        };
        Ok(())
    }

    /// `1 × |remaining|` logits `z · e_i`.
    fn logits(&mut self) -> Result<Var> {
        if self.remaining.is_empty() {
            return Err(Error::State("no remaining candidates to score".into()));
        }
        let rem = self.tape.gather_rows(self.e_refine, &self.remaining)?;
        let t = self.tape.transpose(rem)?;
        self.tape.matmul(self.z, t)
    }

    /// Appends `z_REA = softmax(logits/(τ₀α)) · E_rem` and returns the weights.
    fn reason(&mut self, logits: Var, tau: f64) -> Result<Vec<f64>> {
        let a = self.tape.softmax(logits, tau)?;
        let rem = self.tape.gather_rows(self.e_refine, &self.remaining)?;
        let token = self.tape.matmul(a, rem)?;
        let weights = self.tape.data(a).to_vec();
        self.push(token)?;
        self.rea_cnt += 1;
        Ok(weights)
    }

    /// Removes remaining entry `slot` and appends its refined embedding.
    fn select(&mut self, slot: usize, item_id: usize) -> Result<()> {
        let row = self.remaining.remove(slot);
        self.selected.push(item_id);
        self.rea_cnt = 0;
        if !self.remaining.is_empty() {
            let token = self.tape.gather_rows(self.e_refine, &[row])?;
            self.push(token)?;
        }
        Ok(())
    }
}

/// What a selection policy sees at a non-forced SELECT step. All slices
/// are aligned with the remaining candidates in ascending id order.
pub struct Choice<'a> {
    pub probs: &'a [f64],
    pub logits: &'a [f64],
    pub remaining: &'a [usize],
    /// Number of items already selected.
    pub position: usize,
}

/// Decodes until `K` items are selected. `choose` returns the slot (index
/// into `Choice::remaining`) to select.
pub fn rollout_with<F>(
    tape: &mut Tape,
    model: &GeneratorModel,
    pool: &PoolEncoding,
    binding: Binding,
    mut choose: F,
) -> Result<Rollout>
where
    F: FnMut(&Choice) -> Result<usize>,
{
    let cfg = &model.config;
    let k = cfg.task.list_len;
    if pool.len() < k {
        return Err(Error::Argument(format!("pool of M={} candidates is smaller than K={k}", pool.len())));
    }
    let r = &cfg.reasoning;
    let tau0 = r.tau0;
    let tau_reason = effective_temperature(Stage::Reason, tau0, r.alpha)?;
    let tau_select = effective_temperature(Stage::Recommend, tau0, r.alpha)?;

    let mut state = DecoderState::new(tape, model, pool, binding)?;
    let mut trace = GenerationTrace::default();
    while state.selected.len() < k {
        let logits = state.logits()?;
        let values = state.tape.data(logits).to_vec();
        let n = values.len();
        let h = if n == 1 {
            0.0
        } else {
            entropy(&selection_probs(&values, tau0)).min((n as f64).ln())
        };
        if n > 1 && h > r.entropy_threshold && state.rea_cnt < r.max_reasoning_steps {
            let weights = state.reason(logits, tau_reason)?;
            trace.steps.push(StepRecord {
                kind: StepKind::Reason,
                entropy_before: h,
                temperature: tau_reason,
                chosen_item: None,
                attention_weights: Some(weights),
                logprob: None,
            });
            continue;
        }
        let (slot, lp) = if n == 1 {
            (0, 0.0)
        } else {
            let lp = selection_log_probs(&values, tau_select);
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let remaining: Vec<usize> = state.remaining.iter().map(|&r| pool.ids[r]).collect();
            let slot = choose(&Choice {
                probs: &probs,
                logits: &values,
                remaining: &remaining,
                position: state.selected.len(),
            })?;
            if slot >= n {
                return Err(Error::State(format!("chosen slot {slot} out of range")));
            }
            let lsm = state.tape.log_softmax(logits, tau_select)?;
            let picked = state.tape.pick(lsm, slot)?;
            state.logprob_var = Some(match state.logprob_var {
                Some(acc) => state.tape.add(acc, picked)?,
                None => picked,
            });
            (slot, lp[slot])
        };
        let item = pool.ids[state.remaining[slot]];
        state.logprob_sum += lp;
        state.select(slot, item)?;
        trace.steps.push(StepRecord {
            kind: StepKind::Select,
            entropy_before: h,
            temperature: tau_select,
            chosen_item: Some(item),
            attention_weights: None,
            logprob: Some(lp),
        });
    }
    Ok(Rollout {
        items: state.selected,
        trace,
        logprob_sum: state.logprob_sum,
        logprob_var: state.logprob_var,
    })
}

/// One rollout on `tape`. With [`Binding::Trainable`] the returned
/// `logprob_var` is differentiable with respect to the decoder parameters.
pub fn rollout<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &GeneratorModel,
    pool: &PoolEncoding,
    binding: Binding,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Rollout> {
    rollout_with(tape, model, pool, binding, |c| {
        Ok(match mode {
            DecodeMode::Sample => sample_index(c.probs, rng),
            DecodeMode::Greedy => argmax(c.logits),
        })
    })
}

/// Re-runs decoding with the selections fixed to `items`, so that the
/// log-probability of a recorded list can be differentiated again.
pub fn replay(tape: &mut Tape, model: &GeneratorModel, pool: &PoolEncoding, binding: Binding, items: &[usize]) -> Result<Rollout> {
    let r = rollout_with(tape, model, pool, binding, |c| {
        let want = items
            .get(c.position)
            .ok_or_else(|| Error::Argument("replayed list is shorter than K".into()))?;
        c.remaining
            .iter()
            .position(|id| id == want)
            .ok_or_else(|| Error::Argument(format!("replayed item {want} is not among the remaining candidates")))
    })?;
    if r.items != items {
        return Err(Error::Argument("replayed list is not reachable from this pool".into()));
    }
    Ok(r)
}
