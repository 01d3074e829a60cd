//! Named parameter storage shared by the model and the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Flat registry of named parameter tensors with stable insertion order.
/// Insertion order is the canonical parameter order used by the optimizer
/// and the checkpoint format.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Kaiming-style init for weight matrices / conv kernels.
    pub fn init_he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * std).collect();
        self.insert(name, Tensor::from_vec(shape, data));
    }

    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        limit: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::from_vec(shape, data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_vec(shape, vec![1.0; n]));
    }
}

/// Per-forward-pass binding of parameters to tape leaves.
///
/// Each parameter becomes exactly one leaf node per tape, so gradients from
/// all uses (including both domain branches under weight sharing) accumulate
/// into a single buffer.
pub struct Binding<'s> {
    store: &'s ParamStore,
    nodes: HashMap<usize, NodeId>,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binding {
            store,
            nodes: HashMap::new(),
        }
    }

    /// Leaf node for a named parameter, created on first use.
    pub fn node(&mut self, tape: &mut Tape, name: &str) -> NodeId {
        let idx = self.store.index[name];
        *self
            .nodes
            .entry(idx)
            .or_insert_with(|| tape.param(self.store.tensors[idx].clone()))
    }

    /// Gradients per parameter index after `tape.backward`; untouched
    /// parameters yield `None`.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        let mut out = vec![None; self.store.len()];
        for (&idx, &node) in &self.nodes {
            out[idx] = tape.grad(node).cloned();
        }
        out
    }
}
