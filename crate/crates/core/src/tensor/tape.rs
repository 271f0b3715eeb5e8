use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, bce_with_logits, sigmoid};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        m: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Offset {
        x: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
        n: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax {
        x: Var,
        n: usize,
    },
    LogSoftmax {
        x: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        t: usize,
        d_in: usize,
        d_out: usize,
        k: usize,
    },
    SliceCols {
        x: Var,
        n: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        n: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
        n: usize,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Arc<Vec<f64>>,
    },
    Bce {
        x: Var,
        target: Arc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
    param: Option<ParamId>,
}

/// Ordered record of operations for one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. A tape built with [`Tape::training`]
/// applies dropout from its own seeded generator; [`Tape::new`] evaluates with
/// dropout disabled.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape_numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            tracked,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn is_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Records a tensor; it is tracked iff the tensor requires a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            op: Op::Leaf,
            tracked: t.requires_grad(),
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_grad(false);
        self.leaf(&t)
    }

    /// Records a model parameter. Frozen parameters enter untracked.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    // ── inspection ──────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.tensor(v).item()
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn is_tracked_var(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Gradient accumulated on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Summed gradients of every tracked parameter leaf, keyed by parameter.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                match out.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.is_tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let out = kernels::transpose(self.value(x), m, n);
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(vec![n, m], out, Op::Transpose { x, m, n }, tracked))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (la, lb) = (shape_numel(&sa), shape_numel(&sb));
        let shape = if sa == sb || lb == 1 {
            sa
        } else if la == 1 {
            sb
        } else {
            return Err(Error::dim(format!("elementwise {kind:?} of {sa:?} and {sb:?}")));
        };
        let len = shape_numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<f64> = (0..len)
            .map(|i| f(va[if la == 1 { 0 } else { i }], vb[if lb == 1 { 0 } else { i }]))
            .collect();
        let tracked = self.is_tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Binary { kind, a, b }, tracked))
    }

    /// Sum of equal-shape operands, or of an operand and a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let tracked = self.is_tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, tracked)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let tracked = self.is_tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Offset { x }, tracked)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "row bias {:?} for matrix {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let tracked = self.is_tracked(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, bias, n }, tracked))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let tracked = self.is_tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, op, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// Inverted dropout: zeroes each element with probability `p` and rescales
    /// survivors by `1/(1-p)`. The identity on evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let len = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, scale }, tracked))
    }

    // ── row-wise normalisers ────────────────────────────────────────

    /// Row-wise softmax. Entries whose mask is `false` get probability exactly 0;
    /// every row needs at least one unmasked entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::dim(format!("mask of {} entries for {m}x{n} logits", mask.len())));
            }
        }
        let xs = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: i });
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if allowed(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(vec![m, n], out, Op::Softmax { x, n }, tracked))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let xs = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(vec![m, n], out, Op::LogSoftmax { x, n }, tracked))
    }

    /// Normalises over the last dimension, then applies `gain` and `bias` (both length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::dim("layer norm over an empty dimension"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer norm gain {:?} / bias {:?} for input {shape:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = shape_numel(&shape) / d;
        let (xs, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.is_tracked(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Stride-1 temporal convolution with symmetric zero padding, so the output keeps
    /// the input length. `x` is `T×d_in`, `w` is `k×d_in×d_out` with `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, d_in) = self.dims2(x)?;
        let (k, wd_in, d_out) = match self.shape(w) {
            [k, a, b] => (*k, *a, *b),
            s => return Err(Error::dim(format!("conv kernel must be 3-D, got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("conv kernel size {k} is even")));
        }
        if wd_in != d_in {
            return Err(Error::dim(format!(
                "conv input {:?} with kernel {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let pad = (k - 1) / 2;
        let (xs, ws) = (self.value(x), self.value(w));
        let mut out = vec![0.0; t * d_out];
        for j in 0..k {
            let wj = &ws[j * d_in * d_out..(j + 1) * d_in * d_out];
            // output row r reads input row r + j - pad
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            if lo >= hi {
                continue;
            }
            let src = lo + j - pad;
            kernels::matmul_acc(
                &xs[src * d_in..(src + hi - lo) * d_in],
                wj,
                &mut out[lo * d_out..hi * d_out],
                hi - lo,
                d_in,
                d_out,
            );
        }
        let tracked = self.is_tracked(&[x, w]);
        Ok(self.push(
            vec![t, d_out],
            out,
            Op::Conv1d {
                x,
                w,
                t,
                d_in,
                d_out,
                k,
            },
            tracked,
        ))
    }

    // ── structural ──────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {n} columns",
                start + len
            )));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, n, start, len }, tracked))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concatenation of zero matrices"));
        };
        let (m, _) = self.dims2(first)?;
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mi, ni) = self.dims2(x)?;
            if mi != m {
                return Err(Error::dim(format!(
                    "concatenating {:?} with {:?}",
                    self.shape(first),
                    self.shape(x)
                )));
            }
            parts.push((x, ni));
        }
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &(x, ni) in &parts {
                out.extend_from_slice(&self.value(x)[i * ni..(i + 1) * ni]);
            }
        }
        let tracked = self.is_tracked(xs);
        Ok(self.push(vec![m, n], out, Op::ConcatCols { parts, n }, tracked))
    }

    /// Selects rows of a `V×n` table, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim(format!("row id {bad} out of range for {v} rows")));
        }
        let ts = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&ts[i * n..(i + 1) * n]);
        }
        let tracked = self.is_tracked(&[table]);
        Ok(self.push(
            vec![ids.len(), n],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                n,
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape_numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = Arc::clone(&self.nodes[x.0].value);
        let tracked = self.is_tracked(&[x]);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape(x),
            tracked,
            grad: None,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.is_tracked(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w⊙x` over entries with non-zero weight; zero-weight entries are skipped,
    /// so infinite values there do not poison the result.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "{} weights for tensor of shape {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self
            .value(x)
            .iter()
            .zip(weights.iter())
            .filter(|(_, &w)| w != 0.0)
            .map(|(v, w)| v * w)
            .sum();
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, tracked))
    }

    /// Elementwise binary cross-entropy between `σ(x)` and constant targets, in logit space.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<f64>>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "{} targets for logits of shape {:?}",
                target.len(),
                self.shape(x)
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(target.iter())
            .map(|(&v, &y)| bce_with_logits(v, y))
            .collect();
        let tracked = self.is_tracked(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Bce { x, target }, tracked))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Propagates `d loss / d ·` to every tracked leaf reachable from `loss`.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.tracked {
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let tracked = |v: Var| nodes[v.0].tracked;
        let len_of = |v: Var| nodes[v.0].value.len();

        // Accumulates an elementwise contribution into `grads[v]`.
        fn acc_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if tracked(*a) {
                    let bv = &nodes[b.0].value;
                    acc_with(grads, *a, m * k, |ga| kernels::matmul_nt_acc(g, bv, ga, *m, *n, *k));
                }
                if tracked(*b) {
                    let av = &nodes[a.0].value;
                    acc_with(grads, *b, k * n, |gb| kernels::matmul_tn_acc(av, g, gb, *m, *k, *n));
                }
            }
            Op::Transpose { x, m, n } => {
                // g is n×m
                let gt = kernels::transpose(g, *n, *m);
                acc_with(grads, *x, m * n, |gx| gx.iter_mut().zip(&gt).for_each(|(a, b)| *a += b));
            }
            Op::Binary { kind, a, b } => {
                let out_len = g.len();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                for (target, other, is_a) in [(*a, bv, true), (*b, av, false)] {
                    if !tracked(target) {
                        continue;
                    }
                    let tl = len_of(target);
                    let ol = other.len();
                    acc_with(grads, target, tl, |gt| {
                        for j in 0..out_len {
                            let local = match kind {
                                BinaryKind::Add => 1.0,
                                BinaryKind::Sub => {
                                    if is_a {
                                        1.0
                                    } else {
                                        -1.0
                                    }
                                }
                                BinaryKind::Mul => other[if ol == 1 { 0 } else { j }],
                            };
                            gt[if tl == 1 { 0 } else { j }] += g[j] * local;
                        }
                    });
                }
            }
            Op::Scale { x, factor } => acc_with(grads, *x, g.len(), |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor)
            }),
            Op::Offset { x } | Op::Reshape(x) => {
                acc_with(grads, *x, g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b))
            }
            Op::AddRow { x, bias, n } => {
                if tracked(*x) {
                    acc_with(grads, *x, g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
                if tracked(*bias) {
                    acc_with(grads, *bias, *n, |gb| {
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc_with(grads, *x, g.len(), |gx| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc_with(grads, *x, g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc_with(grads, *x, g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &nodes[x.0].value;
                acc_with(grads, *x, g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Softmax { x, n } => {
                let y = &node.value;
                acc_with(grads, *x, g.len(), |gx| {
                    for (r, (yr, gr)) in y.chunks(*n).zip(g.chunks(*n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..*n {
                            gx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, n } => {
                let y = &node.value;
                acc_with(grads, *x, g.len(), |gx| {
                    for (r, (yr, gr)) in y.chunks(*n).zip(g.chunks(*n)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..*n {
                            gx[r * n + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gv = &nodes[gain.0].value;
                if tracked(*x) {
                    acc_with(grads, *x, g.len(), |gx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let dh: Vec<f64> = gr.iter().zip(gv.iter()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if tracked(*gain) {
                    acc_with(grads, *gain, d, |gg| {
                        for (j, (a, h)) in g.iter().zip(xhat).enumerate() {
                            gg[j % d] += a * h;
                        }
                    });
                }
                if tracked(*bias) {
                    acc_with(grads, *bias, d, |gb| {
                        for (j, a) in g.iter().enumerate() {
                            gb[j % d] += a;
                        }
                    });
                }
            }
            Op::Conv1d {
                x,
                w,
                t,
                d_in,
                d_out,
                k,
            } => {
                let (t, d_in, d_out, k) = (*t, *d_in, *d_out, *k);
                let pad = (k - 1) / 2;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let span = |j: usize| {
                    let lo = pad.saturating_sub(j);
                    let hi = (t + pad).saturating_sub(j).min(t);
                    (lo, hi)
                };
                if tracked(*x) {
                    acc_with(grads, *x, t * d_in, |gx| {
                        for j in 0..k {
                            let (lo, hi) = span(j);
                            if lo >= hi {
                                continue;
                            }
                            let src = lo + j - pad;
                            let wj = &wv[j * d_in * d_out..(j + 1) * d_in * d_out];
                            kernels::matmul_nt_acc(
                                &g[lo * d_out..hi * d_out],
                                wj,
                                &mut gx[src * d_in..(src + hi - lo) * d_in],
                                hi - lo,
                                d_out,
                                d_in,
                            );
                        }
                    });
                }
                if tracked(*w) {
                    acc_with(grads, *w, k * d_in * d_out, |gw| {
                        for j in 0..k {
                            let (lo, hi) = span(j);
                            if lo >= hi {
                                continue;
                            }
                            let src = lo + j - pad;
                            kernels::matmul_tn_acc(
                                &xv[src * d_in..(src + hi - lo) * d_in],
                                &g[lo * d_out..hi * d_out],
                                &mut gw[j * d_in * d_out..(j + 1) * d_in * d_out],
                                hi - lo,
                                d_in,
                                d_out,
                            );
                        }
                    });
                }
            }
            Op::SliceCols { x, n, start, len } => {
                let m = g.len() / len;
                acc_with(grads, *x, m * n, |gx| {
                    for r in 0..m {
                        for c in 0..*len {
                            gx[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols { parts, n } => {
                let m = g.len() / n;
                let mut offset = 0;
                for &(p, np) in parts {
                    if tracked(p) {
                        acc_with(grads, p, m * np, |gp| {
                            for r in 0..m {
                                for c in 0..np {
                                    gp[r * np + c] += g[r * n + offset + c];
                                }
                            }
                        });
                    }
                    offset += np;
                }
            }
            Op::GatherRows { table, ids, n } => {
                let len = len_of(*table);
                acc_with(grads, *table, len, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..*n {
                            gt[id * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Dropout { x, scale } => acc_with(grads, *x, g.len(), |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * scale[j];
                }
            }),
            Op::Sum(x) => {
                let len = len_of(*x);
                acc_with(grads, *x, len, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::WeightedSum { x, weights } => {
                let len = len_of(*x);
                acc_with(grads, *x, len, |gx| {
                    for (a, w) in gx.iter_mut().zip(weights.iter()) {
                        if *w != 0.0 {
                            *a += g[0] * w;
                        }
                    }
                });
            }
            Op::Bce { x, target } => {
                let xv = &nodes[x.0].value;
                acc_with(grads, *x, g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (sigmoid(xv[j]) - target[j]);
                    }
                });
            }
        }
    }
}
