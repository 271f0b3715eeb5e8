//! Small building blocks shared by the encoder, decoder and generator.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.register_xavier(format!("{prefix}.W"), &[d_in, d_out], d_in, d_out, rng)?,
            bias: store.register_const(format!("{prefix}.b"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register_const(format!("{prefix}.gain"), &[d], 1.0)?,
            bias: store.register_const(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Position-wise network `d → 4d → d` with ReLU and dropout between the layers.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
    pub dropout_p: f64,
}

pub const FF_MULTIPLIER: usize = 4;

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, dropout_p: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            expand: Linear::new(store, &format!("{prefix}.fc1"), d, FF_MULTIPLIER * d, rng)?,
            project: Linear::new(store, &format!("{prefix}.fc2"), FF_MULTIPLIER * d, d, rng)?,
            dropout_p,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout_p)?;
        self.project.forward(tape, store, h)
    }
}

/// Pre-norm residual wrapper: `x + dropout(sublayer(LayerNorm(x)))`.
pub fn residual(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNorm,
    x: Var,
    dropout_p: f64,
    sublayer: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let normed = norm.forward(tape, store, x)?;
    let y = sublayer(tape, normed)?;
    let y = tape.dropout(y, dropout_p)?;
    tape.add(x, y)
}
