//! Scaled dot-product and multi-headed attention.
//!
//! Queries and keys may come from streams of different widths: each head projects
//! queries from `d_q` and keys/values from `d_k` into a shared per-head slice of the
//! internal width `d_in`, and the concatenated heads are mapped back to `d_q`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub heads: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_in: usize,
    pub dropout_p: f64,
}

impl MultiHeadConfig {
    /// Internal width defaults to the query width.
    pub fn new(heads: usize, d_q: usize, d_k: usize, dropout_p: f64) -> Self {
        MultiHeadConfig {
            heads,
            d_q,
            d_k,
            d_in: d_q,
            dropout_p,
        }
    }

    pub fn with_internal(mut self, d_in: usize) -> Self {
        self.d_in = d_in;
        self
    }

    pub fn head_width(&self) -> usize {
        self.d_in / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_q == 0 || self.d_k == 0 || self.d_in == 0 {
            return Err(Error::config(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.d_in.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "internal width {} is not divisible by {} heads",
                self.d_in, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    Combined,
}

/// Boolean `T_q×T_k` matrix; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Every query sees exactly the valid keys.
    pub fn padding(t_q: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let allow = (0..t_q).flat_map(|_| key_valid.iter().copied()).collect();
        AttentionMask {
            kind: MaskKind::Padding,
            rows: t_q,
            cols,
            allow,
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let allow = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        AttentionMask {
            kind: MaskKind::Causal,
            rows: t,
            cols: t,
            allow,
        }
    }

    /// Causal pattern restricted to valid keys.
    pub fn causal_padding(key_valid: &[bool]) -> Self {
        let t = key_valid.len();
        let allow = (0..t)
            .flat_map(|i| (0..t).map(move |j| j <= i && key_valid[j]))
            .collect();
        AttentionMask {
            kind: MaskKind::Combined,
            rows: t,
            cols: t,
            allow,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.cols + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Reorders key columns: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_keys(&self, perm: &[usize]) -> Self {
        let allow = (0..self.rows)
            .flat_map(|i| perm.iter().map(move |&p| (i, p)))
            .map(|(i, p)| self.allow[i * self.cols + p])
            .collect();
        AttentionMask { allow, ..self.clone() }
    }
}

/// Returns `(output, attention weights)`.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&AttentionMask>, dropout_p: f64) -> Result<(Var, Var)> {
    let (t_q, d) = tape.dims2(q)?;
    let (t_k, d_k) = tape.dims2(k)?;
    let (t_v, _) = tape.dims2(v)?;
    if d != d_k || t_k != t_v {
        return Err(Error::dim(format!(
            "attention with Q {:?}, K {:?}, V {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if let Some(m) = mask {
        if m.dims() != (t_q, t_k) {
            return Err(Error::dim(format!(
                "mask {:?} for {t_q} queries and {t_k} keys",
                m.dims()
            )));
        }
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(logits, mask.map(AttentionMask::as_slice))?;
    let dropped = tape.dropout(weights, dropout_p)?;
    Ok((tape.matmul(dropped, v)?, weights))
}

/// `Softmax(QKᵀ/√d)·V` with masked keys excluded from the softmax and dropout on the weights.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    dropout_p: f64,
) -> Result<Var> {
    attend(tape, q, k, v, mask, dropout_p).map(|(out, _)| out)
}

/// Attention weights only (rows sum to one over allowed keys).
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    let v = k;
    attend(tape, q, k, v, mask, 0.0).map(|(_, w)| w)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: MultiHeadConfig,
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_out: ParamId,
}

impl MultiHeadAttention {
    pub fn new(cfg: MultiHeadConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hw = cfg.head_width();
        let mut heads = |name: &str, d: usize, rng: &mut _| -> Result<Vec<ParamId>> {
            (0..cfg.heads)
                .map(|h| store.register_xavier(format!("{prefix}.{name}.head{h}"), &[d, hw], d, hw, rng))
                .collect()
        };
        let w_q = heads("Wq", cfg.d_q, rng)?;
        let w_k = heads("Wk", cfg.d_k, rng)?;
        let w_v = heads("Wv", cfg.d_k, rng)?;
        let w_out = store.register_xavier(format!("{prefix}.Wout"), &[cfg.d_in, cfg.d_q], cfg.d_in, cfg.d_q, rng)?;
        Ok(MultiHeadAttention {
            cfg,
            w_q,
            w_k,
            w_v,
            w_out,
        })
    }

    /// `q: T_q×d_q`, `k, v: T_k×d_k` → `T_q×d_q`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (_, dq) = tape.dims2(q)?;
        let (_, dk) = tape.dims2(k)?;
        let (_, dv) = tape.dims2(v)?;
        if dq != self.cfg.d_q || dk != self.cfg.d_k || dv != self.cfg.d_k {
            return Err(Error::dim(format!(
                "multi-head attention configured for d_q={}, d_k={} got q {:?}, k {:?}, v {:?}",
                self.cfg.d_q,
                self.cfg.d_k,
                tape.shape(q),
                tape.shape(k),
                tape.shape(v)
            )));
        }
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let wq = tape.param(store, self.w_q[h]);
            let wk = tape.param(store, self.w_k[h]);
            let wv = tape.param(store, self.w_v[h]);
            let qh = tape.matmul(q, wq)?;
            let kh = tape.matmul(k, wk)?;
            let vh = tape.matmul(v, wv)?;
            heads.push(scaled_dot_product_attention(
                tape,
                qh,
                kh,
                vh,
                mask,
                self.cfg.dropout_p,
            )?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let w_out = tape.param(store, self.w_out);
        tape.matmul(cat, w_out)
    }
}
