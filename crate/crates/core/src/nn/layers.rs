//! Transformer building blocks on top of [`Tape`].
//!
//! Layers are post-norm: `x = LN(x + MHA(x))`, then `x = LN(x + FFN(x))`,
//! with a ReLU feed-forward of inner width `4·d`.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::nn::{ParameterSet, Tape, Tensor, Var};

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

pub fn bind(tape: &mut Tape, params: &ParameterSet, name: &str, binding: Binding) -> Result<Var> {
    match binding {
        Binding::Trainable => tape.param(params, name),
        Binding::Frozen => tape.frozen(params, name),
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(
        format!("{prefix}.w"),
        Tensor::uniform_fan_in(&[fan_in, fan_out], fan_in, rng),
    )?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]))
}

pub fn init_layer_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[1, dim], 1.0))?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, dim]))
}

pub fn init_attention<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.{p}"), dim, dim, rng)?;
    }
    Ok(())
}

pub fn init_transformer_layer<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    init_attention(params, &format!("{prefix}.attn"), dim, rng)?;
    init_layer_norm(params, &format!("{prefix}.ln1"), dim)?;
    init_linear(params, &format!("{prefix}.ffn1"), dim, 4 * dim, rng)?;
    init_linear(params, &format!("{prefix}.ffn2"), 4 * dim, dim, rng)?;
    init_layer_norm(params, &format!("{prefix}.ln2"), dim)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, prefix: &str, binding: Binding) -> Result<Self> {
        Ok(Self {
            w: bind(tape, params, &format!("{prefix}.w"), binding)?,
            b: bind(tape, params, &format!("{prefix}.b"), binding)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, prefix: &str, binding: Binding) -> Result<Self> {
        Ok(Self {
            gamma: bind(tape, params, &format!("{prefix}.gamma"), binding)?,
            beta: bind(tape, params, &format!("{prefix}.beta"), binding)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionBlock {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, prefix: &str, binding: Binding) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(tape, params, &format!("{prefix}.q"), binding)?,
            k: Linear::bind(tape, params, &format!("{prefix}.k"), binding)?,
            v: Linear::bind(tape, params, &format!("{prefix}.v"), binding)?,
            o: Linear::bind(tape, params, &format!("{prefix}.o"), binding)?,
        })
    }
}

/// Per-head scaled dot-product self-attention over `batch` stacked
/// sequences of equal length, with heads concatenated and projected back to
/// the model width. Returns the output and the raw attention node (whose
/// weights are available through [`Tape::attention_probs`]).
pub fn masked_multi_head_attention(
    tape: &mut Tape,
    block: &AttentionBlock,
    seq: Var,
    heads: usize,
    batch: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let d = tape.value(seq).dims2()?.1;
    if heads == 0 || d % heads != 0 {
        return arg_err(format!("model width {d} not divisible by {heads} heads"));
    }
    let q = block.q.forward(tape, seq)?;
    let k = block.k.forward(tape, seq)?;
    let v = block.v.forward(tape, seq)?;
    let att = tape.attention(q, k, v, heads, batch, causal)?;
    let out = block.o.forward(tape, att)?;
    Ok((out, att))
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attn: AttentionBlock,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, prefix: &str, binding: Binding) -> Result<Self> {
        Ok(Self {
            attn: AttentionBlock::bind(tape, params, &format!("{prefix}.attn"), binding)?,
            ln1: LayerNorm::bind(tape, params, &format!("{prefix}.ln1"), binding)?,
            ffn1: Linear::bind(tape, params, &format!("{prefix}.ffn1"), binding)?,
            ffn2: Linear::bind(tape, params, &format!("{prefix}.ffn2"), binding)?,
            ln2: LayerNorm::bind(tape, params, &format!("{prefix}.ln2"), binding)?,
        })
    }

    fn feed_forward_block(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.ffn1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.ffn2.forward(tape, h)?;
        let r = tape.add(x, h)?;
        self.ln2.forward(tape, r)
    }

    fn forward(&self, tape: &mut Tape, seq: Var, heads: usize, batch: usize, causal: bool) -> Result<Var> {
        let (a, _) = masked_multi_head_attention(tape, &self.attn, seq, heads, batch, causal)?;
        let r = tape.add(seq, a)?;
        let x = self.ln1.forward(tape, r)?;
        self.feed_forward_block(tape, x)
    }

    /// Bidirectional layer over `batch` stacked sequences.
    pub fn encoder_forward(&self, tape: &mut Tape, seq: Var, heads: usize, batch: usize) -> Result<Var> {
        self.forward(tape, seq, heads, batch, false)
    }

    /// Causally masked layer over `batch` stacked sequences.
    pub fn decoder_forward(&self, tape: &mut Tape, seq: Var, heads: usize, batch: usize) -> Result<Var> {
        self.forward(tape, seq, heads, batch, true)
    }

    /// Processes one new token against the cached keys/values of all
    /// earlier tokens and returns its output row. Equivalent to the last
    /// row of [`Self::decoder_forward`] over the full sequence.
    pub fn decoder_step(&self, tape: &mut Tape, token: Var, cache: &mut KvCache, heads: usize) -> Result<Var> {
        let q = self.attn.q.forward(tape, token)?;
        let k_new = self.attn.k.forward(tape, token)?;
        let v_new = self.attn.v.forward(tape, token)?;
        let (k, v) = match (cache.k, cache.v) {
            (Some(k), Some(v)) => (tape.concat_rows(&[k, k_new])?, tape.concat_rows(&[v, v_new])?),
            _ => (k_new, v_new),
        };
        cache.k = Some(k);
        cache.v = Some(v);
        cache.len += 1;
        let att = tape.attention(q, k, v, heads, 1, true)?;
        let a = self.attn.o.forward(tape, att)?;
        let r = tape.add(token, a)?;
        let x = self.ln1.forward(tape, r)?;
        self.feed_forward_block(tape, x)
    }
}

/// Keys and values of every token processed so far by one decoder layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Var>,
    v: Option<Var>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
