//! Trainable parameter storage and plain stochastic gradient descent.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Optimiser constants. Defaults follow the training setup used throughout:
/// learning rate 0.1 and minibatches of 64 pairs.
#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub minibatch_size: usize,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, minibatch_size: usize) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if minibatch_size == 0 {
            return Err(Error::invalid("minibatch size must be positive".to_string()));
        }
        Ok(SgdConfig { learning_rate, minibatch_size })
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.1, minibatch_size: 64 }
    }
}

/// Identifier of one named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    touched: bool,
}

/// Named collection of trainable tensors with persistent gradient buffers.
///
/// Names are unique and shapes are immutable after creation. Iteration order
/// is always sorted by name, which keeps checkpoints and updates
/// deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry { name: name.to_string(), value, grad, touched: false });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} has shape {:?}, refusing {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Parameters sorted by name.
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.index.iter().map(|(name, &i)| (name.as_str(), &self.entries[i].value))
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Folds the gradients a backward sweep left on `tape` into the
    /// persistent per-parameter buffers.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        for &(node, id) in tape.param_links() {
            if let Some(g) = tape.node_grad(node) {
                let entry = &mut self.entries[id.0];
                for (acc, v) in entry.grad.iter_mut().zip(g) {
                    *acc += v;
                }
                entry.touched = true;
            }
        }
    }

    /// Adds directly into a parameter's gradient buffer (test and tooling
    /// hook; training uses [`ParamStore::absorb_grads`]).
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if grad.len() != entry.grad.len() {
            return Err(Error::shape(format!(
                "gradient for {:?} has {} values, parameter has {}",
                entry.name,
                grad.len(),
                entry.grad.len()
            )));
        }
        for (acc, v) in entry.grad.iter_mut().zip(grad) {
            *acc += v;
        }
        entry.touched = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.touched = false;
        }
    }

    /// One plain SGD update: `theta <- theta - lr * grad`, then gradients are
    /// zeroed. Every parameter must have received a gradient since the last
    /// step.
    pub fn sgd_step(&mut self, config: &SgdConfig) -> Result<()> {
        if let Some(missing) = self.entries.iter().find(|e| !e.touched) {
            return Err(Error::invalid(format!(
                "sgd step with no gradient for parameter {:?}",
                missing.name
            )));
        }
        for e in &mut self.entries {
            for (v, g) in e.value.values_mut().iter_mut().zip(&e.grad) {
                *v -= config.learning_rate * *g;
            }
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.touched = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn sgd_single_step() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad(id, &[2.0]).unwrap();
        store.sgd_step(&SgdConfig::new(0.1, 1).unwrap()).unwrap();
        assert_eq!(store.value(id).item(), 0.8);
        assert_eq!(store.grad(id), &[0.0]);
    }

    #[test]
    fn sgd_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        store.accumulate_grad(id, &[0.0, 0.0]).unwrap();
        store.sgd_step(&SgdConfig::default()).unwrap();
        assert_eq!(store.value(id).values(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_two_steps_on_half_quadratic() {
        // loss = 0.5 * theta^2, gradient = theta; from 1.0 with lr 0.1 two
        // steps land on 0.81.
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(1.0)).unwrap();
        let cfg = SgdConfig::new(0.1, 1).unwrap();
        for _ in 0..2 {
            let g = store.value(id).item();
            store.accumulate_grad(id, &[g]).unwrap();
            store.sgd_step(&cfg).unwrap();
        }
        assert!((store.value(id).item() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_missing_gradient() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        let b = store.add("b", Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad(b, &[1.0]).unwrap();
        assert!(store.sgd_step(&SgdConfig::default()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn absorb_grads_accumulates_across_tapes() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let loss = tape.sum(w);
            tape.backward(loss).unwrap();
            store.absorb_grads(&tape);
        }
        assert_eq!(store.grad(id), &[2.0, 2.0]);
    }
}
