use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Which half of the model a parameter belongs to; groups can be frozen
/// independently (the encoder is frozen during self-critical fine-tuning).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

impl ParamGroup {
    fn slot(self) -> usize {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Decoder => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters with a gradient accumulator per tensor.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    grads: Vec<Tensor>,
    trainable: [bool; 2],
    index: HashMap<String, usize>,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
            grads: Vec::new(),
            trainable: [true, true],
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape()));
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        Ok(ParamId(id))
    }

    /// Xavier-uniform `[fan_in × fan_out]` weight matrix.
    pub fn xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?, group)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, group)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64, group: ParamGroup) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value), group)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable[group.slot()] = trainable;
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group.slot()]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the accumulators. Frozen groups stay at zero.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.trainable[self.groups[i].slot()] {
                continue;
            }
            self.grads[i].add_assign(g);
        }
    }

    /// True when every parameter tensor is bit-identical to `other`'s.
    pub fn bit_identical(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn bit_identical_group(&self, other: &ParameterSet, group: ParamGroup) -> bool {
        self.ids().filter(|&id| self.group(id) == group).all(|id| {
            let a = self.value(id);
            let b = other.value(id);
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add_to(&mut self, id: ParamId, grad: &Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Element `i` of the flattened gradient for `id`, zero when absent.
    pub fn component(&self, id: ParamId, i: usize) -> f64 {
        self.get(id).map_or(0.0, |t| t.data()[i])
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add_to(ParamId(i), g);
            }
        }
    }
}
