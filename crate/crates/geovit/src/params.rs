//! Named parameter storage shared by model construction, the optimizer, and
//! checkpointing. Modules register parameters once at build time and address
//! them through `ParamId` handles; the optimizer walks entries in
//! registration order, which is also the initialization draw order.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Initialization class of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrices: truncated normal, sigma 0.02, clipped at 2 sigma.
    Weight,
    /// Additive offsets: zero.
    Bias,
    /// Normalization scales: one.
    Gamma,
    /// Normalization offsets: zero.
    Beta,
    /// Learned positional tables: same draw as weights.
    Positional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// First-moment optimizer state, kept with the parameter so checkpoints
    /// capture the full training state.
    pub m: Tensor<T>,
    /// Second-moment optimizer state.
    pub v: Tensor<T>,
}

#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
    step_count: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            step_count: 0,
        }
    }

    /// Registers a parameter under a unique name. Values start at the kind's
    /// resting point (zero / one); call `init` to draw weights.
    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "parameter `{name}` has invalid shape {shape:?}"
            )));
        }
        let value = match kind {
            ParamKind::Gamma => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        let id = self.entries.len();
        self.by_name.insert(name.to_owned(), id);
        self.entries.push(ParamEntry {
            name: name.to_owned(),
            kind,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            value,
        });
        Ok(ParamId(id))
    }

    /// Draws fresh initial values for every entry, in registration order,
    /// from a single stream derived from `seed`. Resets optimizer state.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::INIT, 0));
        for e in &mut self.entries {
            let shape = e.value.shape().to_vec();
            let value = match e.kind {
                ParamKind::Weight | ParamKind::Positional => {
                    let data = (0..e.value.numel())
                        .map(|_| T::from_f64(truncated_normal(&mut rng) * 0.02))
                        .collect();
                    Tensor::from_data(shape.clone(), data)
                }
                ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&shape),
                ParamKind::Gamma => Tensor::ones(&shape),
            };
            e.value = value;
            e.m = Tensor::zeros(&shape);
            e.v = Tensor::zeros(&shape);
        }
        self.step_count = 0;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Optimizer steps applied so far (bias-correction time index).
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, t: u64) {
        self.step_count = t;
    }

    /// Replaces a parameter value; the shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value.detach();
        Ok(())
    }

    pub(crate) fn set_optimizer_state(
        &mut self,
        id: ParamId,
        m: Tensor<T>,
        v: Tensor<T>,
    ) -> Result<()> {
        let e = &mut self.entries[id.0];
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_optimizer_state",
                lhs: e.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        e.m = m.detach();
        e.v = v.detach();
        Ok(())
    }

    /// Adds `delta` to one coordinate of one parameter. Finite-difference
    /// probing uses this; it is not a training-path operation.
    pub fn nudge(&mut self, id: ParamId, coord: usize, delta: T) {
        let e = &mut self.entries[id.0];
        let mut data = e.value.to_vec();
        data[coord] = data[coord] + delta;
        e.value = Tensor::from_data(e.value.shape().to_vec(), data);
    }

    /// Tracked views of every parameter on `tape`, for a training forward
    /// pass. Create one set per step and reuse it across the whole batch so
    /// per-sample gradients accumulate on the same leaves.
    pub fn tracked(&self, tape: &Tape<T>) -> ParamTensors<T> {
        ParamTensors {
            tensors: self.entries.iter().map(|e| tape.watch(&e.value)).collect(),
        }
    }

    /// Untracked views for inference.
    pub fn frozen(&self) -> ParamTensors<T> {
        ParamTensors {
            tensors: self.entries.iter().map(|e| e.value.clone()).collect(),
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// One materialized view per parameter, aligned with the store's ids.
pub struct ParamTensors<T: Scalar> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamTensors<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}
