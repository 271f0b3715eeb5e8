use std::collections::HashMap;

use rand::Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model weights in registration order.
///
/// Layer constructors register their tensors under dotted paths
/// (`encoder.layer0.self_att_a.Wq.head0`), so two stores built from the same
/// configuration have identical names, shapes and ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        Ok(id)
    }

    /// Registers a tensor drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`.
    pub fn register_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn register_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.register(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Marks every parameter under `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.set_requires_grad(trainable);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients recorded on `tape` into each tensor's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (id, g) in tape.param_grads() {
            self.tensors[id.0].accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Copies every parameter under `prefix` from `other`; names and shapes must agree.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::config(format!("source store lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            let trainable = t.requires_grad();
            *t = src.clone().with_grad(trainable);
            t.zero_grad();
            copied += 1;
        }
        Ok(copied)
    }

    /// Replaces all values from `(name, tensor)` pairs; the set of names must match exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::config(format!("unexpected parameter {name}")))?;
            let slot = &mut self.tensors[id.0];
            if slot.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            let trainable = slot.requires_grad();
            *slot = t.with_grad(trainable);
        }
        Ok(())
    }

    /// True when every value under `prefix` is bit-identical in both stores.
    pub fn bit_identical(&self, other: &ParamStore, prefix: &str) -> bool {
        self.iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .all(|(name, t)| {
                other.by_name(name).is_some_and(|o| {
                    o.shape() == t.shape() && o.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}
