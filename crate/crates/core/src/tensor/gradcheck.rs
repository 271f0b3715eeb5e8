//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on an evaluation tape, so it is
//! independent of the backward rules it is used to verify.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(usize, usize),
}

/// Compares tape gradients of the scalar `f` against central differences with step `h`.
///
/// Every input tensor and every trainable parameter in `store` is a differentiation
/// target. At most `max_coords` coordinates (sampled with `seed`) are perturbed.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    max_coords: usize,
    seed: u64,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad(true)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, store, &vars)?;
    tape.backward(out)?;
    let param_grads = tape.param_grads();

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| Coord::Input(i, j)));
    }
    for id in store.ids() {
        if store.get(id).requires_grad() {
            coords.extend((0..store.get(id).len()).map(|j| Coord::Param(id.index(), j)));
        }
    }
    if coords.is_empty() {
        return Err(Error::contract("gradient check with nothing to differentiate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, store, &vars)?;
        tape.item(out)
    };

    let ids: Vec<_> = store.ids().collect();
    let mut scratch_store = store.clone();
    let mut scratch_inputs = inputs.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    for &c in &coords {
        let (analytic, numeric) = match c {
            Coord::Input(i, j) => {
                let orig = inputs[i].data()[j];
                scratch_inputs[i].data_mut()[j] = orig + h;
                let plus = eval(store, &scratch_inputs)?;
                scratch_inputs[i].data_mut()[j] = orig - h;
                let minus = eval(store, &scratch_inputs)?;
                scratch_inputs[i].data_mut()[j] = orig;
                let a = tape.grad(vars[i]).map_or(0.0, |g| g[j]);
                (a, (plus - minus) / (2.0 * h))
            }
            Coord::Param(p, j) => {
                let id = ids[p];
                let orig = store.get(id).data()[j];
                scratch_store.get_mut(id).data_mut()[j] = orig + h;
                let plus = eval(&scratch_store, &inputs)?;
                scratch_store.get_mut(id).data_mut()[j] = orig - h;
                let minus = eval(&scratch_store, &inputs)?;
                scratch_store.get_mut(id).data_mut()[j] = orig;
                let a = param_grads.get(&id).map_or(0.0, |g| g[j]);
                (a, (plus - minus) / (2.0 * h))
            }
        };
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
        max_abs = max_abs.max((analytic - numeric).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    Ok(GradCheckReport {
        rel_error: diff2.sqrt() / denom,
        max_abs_error: max_abs,
        coords: coords.len(),
    })
}

/// Random tensor with entries uniform in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
