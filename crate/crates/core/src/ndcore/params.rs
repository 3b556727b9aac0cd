use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with gradient accumulators.
///
/// Entries keep their insertion order, which is also the checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    rng: StdRng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
            rng: StdRng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a tensor under a fresh name.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from the store's RNG.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = self.rng.random_range(-bound..bound);
        }
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// All ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.names[id.0].starts_with(prefix))
            .collect()
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

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (g, d) in self.grads[id.0].data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn zero_grad_of(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.grads[id.0].fill(0.0);
        }
    }

    /// Euclidean norm of the concatenated gradients of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.grads[id.0].data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the gradients of `ids` so that their joint max-abs entry is at most `max`.
    pub fn clip_grad_inf_norm(&mut self, ids: &[ParamId], max: f64) -> f64 {
        let norm = ids
            .iter()
            .map(|id| self.grads[id.0].max_abs())
            .fold(0.0, f64::max);
        if norm > max {
            let scale = max / norm;
            for id in ids {
                self.grads[id.0].data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}
