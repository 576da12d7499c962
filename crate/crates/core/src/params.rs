//! Named parameter storage shared by the backbone, heads and optimizer.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Canonical f32 storage of all model state, keyed by name in insertion
/// order. `trainable` entries receive gradients and optimizer updates;
/// buffers (batchnorm running stats, adaface norm stats) do not.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::integrity(format!("missing parameter '{name}'")))?;
        Ok(&self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::integrity(format!("missing parameter '{name}'")))?;
        Ok(&mut self.tensors[i])
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        let cur = self.get_mut(name)?;
        if cur.shape() != tensor.shape() {
            return Err(Error::integrity(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                cur.shape(),
                tensor.shape()
            )));
        }
        *cur = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.trainable[i])
            .unwrap_or(false)
    }
}

/// Per-graph binding of the store: every trainable parameter becomes a
/// requires-grad leaf, buffers stay as plain tensors read on demand.
pub struct Bound<T: Scalar> {
    vars: HashMap<String, Var>,
    buffers: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn bind(graph: &mut Graph<T>, store: &ParamStore) -> Self {
        let mut vars = HashMap::new();
        let mut buffers = HashMap::new();
        for (name, tensor, trainable) in store.iter() {
            if trainable {
                vars.insert(name.to_string(), graph.leaf(tensor.cast::<T>(), true));
            } else {
                buffers.insert(name.to_string(), tensor.cast::<T>());
            }
        }
        Bound { vars, buffers }
    }

    /// Bind with an override set, used by grad_check to perturb f64 copies.
    pub fn bind_with(
        graph: &mut Graph<T>,
        store: &ParamStore,
        overrides: &HashMap<String, Tensor<T>>,
    ) -> Self {
        let mut vars = HashMap::new();
        let mut buffers = HashMap::new();
        for (name, tensor, trainable) in store.iter() {
            let t = overrides
                .get(name)
                .cloned()
                .unwrap_or_else(|| tensor.cast::<T>());
            if trainable {
                vars.insert(name.to_string(), graph.leaf(t, true));
            } else {
                buffers.insert(name.to_string(), t);
            }
        }
        Bound { vars, buffers }
    }

    /// Swap the leaf behind a name, used by composite gradient checks to
    /// route a perturbed input through a specific parameter slot.
    pub fn override_var(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::integrity(format!("unbound parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::integrity(format!("unbound buffer '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// Fan-in-scaled uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data length by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fan_in_bound() {
        // fan-in 9 gives bound 1/3
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = uniform_fan_in(&mut rng, &[4, 9], 9);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn seeded_init_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = uniform_fan_in(&mut a, &[3, 3], 3);
        let tb = uniform_fan_in(&mut b, &[3, 3], 3);
        assert_eq!(ta.data(), tb.data());
        let mut c = ChaCha8Rng::seed_from_u64(8);
        let tc = uniform_fan_in(&mut c, &[3, 3], 3);
        assert_ne!(ta.data(), tc.data());
    }
}
