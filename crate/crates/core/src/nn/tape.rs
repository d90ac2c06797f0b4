//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and enough context to
//! run its vector-Jacobian product. Parameters enter the tape by name, and
//! [`Tape::backward`] returns gradients keyed by those names. A tape is
//! single-use: build the forward pass, call `backward` once, drop it.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::functional::{log_softmax_unchecked, softmax_unchecked};
use crate::nn::{ParameterSet, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Pick(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        causal: bool,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Stores each gradient on the matching parameter. Parameters the loss
    /// never reached receive an all-zero gradient.
    pub fn write_into(&self, params: &mut ParameterSet) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let t = params.get_mut(&name)?;
            let g = match self.grads.get(&name) {
                Some(g) => g.clone(),
                None => vec![0.0; t.len()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a·b (+ c if accumulate)` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents match (m, k, n) and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(src) {
                *x += *y;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs_of(&op).iter().any(|&i| self.needs(i)),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::GatherRows(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Pick(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params.get_shared(name)?;
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_owned()),
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Parameter value entered as a constant (no gradient tracked).
    pub fn frozen(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params.get_shared(name)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return shape_err(format!("matmul inner dimensions {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    /// `x (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let (r, n2) = self.dims(row)?;
        if r != 1 || n != n2 {
            return shape_err(format!("add_row of {m}x{n} and {r}x{n2}"));
        }
        let b = self.data(row);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "mul of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sigmoid(a), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.ln()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Log(a), "log")
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Column-wise sum `m×n → 1×n`, accumulated in ascending row order.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a)?;
        let mut out = vec![0.0; n];
        for chunk in self.data(a).chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += *x;
            }
        }
        self.push(Tensor::matrix(1, n, out)?, Op::SumRows(a), "sum_rows")
    }

    /// Rows of `a` at `idx`, in that order (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if idx.is_empty() {
            return arg_err("gather of zero rows");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return shape_err(format!("row index {bad} out of range for {m} rows"));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::matrix(idx.len(), n, out)?,
            Op::GatherRows(a, idx.to_vec()),
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("concat of zero tensors");
        }
        let (_, n) = self.dims(parts[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return shape_err(format!("concat_rows width {c} != {n}"));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.push(
            Tensor::matrix(rows, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("concat of zero tensors");
        }
        let (m, _) = self.dims(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return shape_err(format!("concat_cols height {r} != {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// `softmax(a / tau)` over all elements of `a`.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return arg_err(format!("temperature must be positive, got {tau}"));
        }
        let out = softmax_unchecked(self.data(a), tau);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a, tau), "softmax")
    }

    /// `log softmax(a / tau)` over all elements of `a`.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return arg_err(format!("temperature must be positive, got {tau}"));
        }
        let out = log_softmax_unchecked(self.data(a), tau);
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LogSoftmax(a, tau),
            "log_softmax",
        )
    }

    /// Element `idx` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.value(a).len();
        if idx >= n {
            return shape_err(format!("pick index {idx} out of range for {n} elements"));
        }
        let v = self.data(a)[idx];
        self.push(Tensor::scalar(v), Op::Pick(a, idx), "pick")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.dims(gamma)? != (1, n) || self.dims(beta)? != (1, n) {
            return shape_err(format!("layer_norm affine params must be 1x{n}"));
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for (r, row) in self.data(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// segments.
    ///
    /// `q` holds `batch·Tq` rows and `k`, `v` hold `batch·Tk` rows, all of
    /// width `d` (already projected). Under `causal`, query `i` of a segment
    /// sits at absolute position `Tk − Tq + i` and sees keys `0..=` that
    /// position, so a single query row against a longer key cache is the
    /// incremental-decoding case.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rq, d) = self.dims(q)?;
        let (rk, dk) = self.dims(k)?;
        if self.dims(v)? != (rk, dk) || dk != d {
            return shape_err("attention q/k/v widths or k/v rows disagree");
        }
        if heads == 0 || d % heads != 0 {
            return arg_err(format!("model width {d} not divisible by {heads} heads"));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return shape_err(format!("{rq}/{rk} rows not divisible into {batch} segments"));
        }
        let tq = rq / batch;
        let tk = rk / batch;
        if causal && tq > tk {
            return shape_err("causal attention with more queries than keys");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let visible = if causal { tk - tq + i + 1 } else { tk };
                    let qrow = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(visible) {
                        let krow = &kd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        *s = dot(qrow, krow) * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut().take(visible) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let pbase = ((b * heads + h) * tq + i) * tk;
                    let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    for j in 0..visible {
                        let p = scores[j] / total;
                        probs[pbase + j] = p;
                        let vrow = &vd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(rq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                causal,
                probs,
            },
            "attention",
        )
    }

    /// Attention weights of an attention node, laid out
    /// `[segment][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => add_into_map(&mut out.grads, name, &g),
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, n as isize, 1, self.data(*b), 1, n as isize, &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), 1, k as isize, g, n as isize, 1, &mut db, false);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a)?;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.needs(*row) {
                    let (_, n) = self.dims(*row)?;
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += *v;
                        }
                    }
                    add_into(&mut grads[row.0], &dr);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::AddScalar(a) => add_into(&mut grads[a.0], g),
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                add_into(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let (m, _) = self.dims(*a)?;
                let da: Vec<f64> = (0..m).flat_map(|_| g.iter().copied()).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims(*a)?;
                let mut da = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[r * n + j];
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = y.dims2()?;
                let mut col = 0;
                for p in parts {
                    let (_, w) = self.dims(*p)?;
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    col += w;
                }
            }
            Op::Softmax(a, tau) => {
                let p = y.data();
                let dot_pg: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
                let da: Vec<f64> = p
                    .iter()
                    .zip(g)
                    .map(|(p, g)| p * (g - dot_pg) / tau)
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::LogSoftmax(a, tau) => {
                let gsum: f64 = g.iter().sum();
                let da: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(ly, g)| (g - ly.exp() * gsum) / tau)
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Pick(a, idx) => {
                let mut da = vec![0.0; self.value(*a).len()];
                da[*idx] = g[0];
                add_into(&mut grads[a.0], &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x)?;
                let gam = self.data(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                            db[j] += g[r * n + j];
                        }
                    }
                    if self.needs(*gamma) {
                        add_into(&mut grads[gamma.0], &dg);
                    }
                    if self.needs(*beta) {
                        add_into(&mut grads[beta.0], &db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[r * n + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = g[r * n + j] * gam[j];
                            dx[r * n + j] = inv_std[r] / nf
                                * (nf * dh - sum_dh - xhat[r * n + j] * sum_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                causal,
                probs,
            } => {
                let (heads, batch) = (*heads, *batch);
                let (rq, d) = self.dims(*q)?;
                let (rk, _) = self.dims(*k)?;
                let tq = rq / batch;
                let tk = rk / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; rq * d];
                let mut dk = vec![0.0; rk * d];
                let mut dv = vec![0.0; rk * d];
                let mut dp = vec![0.0; tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let visible = if *causal { tk - tq + i + 1 } else { tk };
                            let pbase = ((b * heads + h) * tq + i) * tk;
                            let qi = (b * tq + i) * d + off;
                            let grow = &g[qi..qi + dh];
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                let vj = (b * tk + j) * d + off;
                                let p = probs[pbase + j];
                                dp[j] = dot(grow, &vd[vj..vj + dh]);
                                weighted += p * dp[j];
                                for (dvx, gx) in dv[vj..vj + dh].iter_mut().zip(grow) {
                                    *dvx += p * gx;
                                }
                            }
                            for j in 0..visible {
                                let ds = probs[pbase + j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (b * tk + j) * d + off;
                                for t in 0..dh {
                                    dq[qi + t] += ds * kd[kj + t];
                                    dk[kj + t] += ds * qd[qi + t];
                                }
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    add_into(&mut grads[q.0], &dq);
                }
                if self.needs(*k) {
                    add_into(&mut grads[k.0], &dk);
                }
                if self.needs(*v) {
                    add_into(&mut grads[v.0], &dv);
                }
            }
        }
        Ok(())
    }
}

fn add_into_map(map: &mut BTreeMap<String, Vec<f64>>, name: &str, g: &[f64]) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += *v;
            }
        }
        None => {
            map.insert(name.to_owned(), g.to_vec());
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
