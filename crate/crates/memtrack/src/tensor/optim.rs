//! Named parameter storage and the decoupled weight-decay Adam optimizer.

use std::collections::HashMap;

use super::{NodeId, Tape, Tensor};

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Owns all learnable parameters: values plus additively-accumulated
/// gradients that persist across tapes until explicitly zeroed.
/// Iteration order is registration order, which keeps every downstream
/// consumer (optimizer, checkpoints, flattening) deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

/// Tape nodes for every parameter, aligned with registration order.
pub struct Bindings {
    nodes: Vec<NodeId>,
    pub trainable: bool,
}

impl Bindings {
    pub fn node(&self, p: PId) -> NodeId {
        self.nodes[p.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> PId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = PId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        let numel = value.numel();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: vec![0.0; numel],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn name(&self, p: PId) -> &str {
        &self.entries[p.0].name
    }

    pub fn value(&self, p: PId) -> &Tensor {
        &self.entries[p.0].value
    }

    pub fn value_mut(&mut self, p: PId) -> &mut Tensor {
        &mut self.entries[p.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<PId> {
        self.by_name.get(name).copied().map(PId)
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> + '_ {
        (0..self.entries.len()).map(PId)
    }

    pub fn grad(&self, p: PId) -> &[f64] {
        &self.entries[p.0].grad
    }

    /// Insert every parameter into `tape` as a leaf.
    pub fn bind_all(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let nodes = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable))
            .collect();
        Bindings { nodes, trainable }
    }

    /// Bind every parameter as a slice of one flat 1 x total node. Lets
    /// whole-model expressions run under `check_gradients`.
    pub fn bind_from_flat(&self, tape: &mut Tape, flat: NodeId) -> Bindings {
        assert_eq!(tape.value(flat).numel(), self.total_elems());
        let trainable = tape.requires_grad(flat);
        let mut nodes = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            let n = e.value.numel();
            let s = tape.slice_cols(flat, offset, n);
            let r = tape.reshape(s, e.value.rows(), e.value.cols());
            nodes.push(r);
            offset += n;
        }
        Bindings { nodes, trainable }
    }

    /// Add the tape's gradients for `bindings` into the store accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (entry, &node) in self.entries.iter_mut().zip(&bindings.nodes) {
            if let Some(g) = tape.grad(node) {
                for (a, b) in entry.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= k);
            }
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_elems());
        for e in &self.entries {
            out.extend_from_slice(&e.value.data);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_elems());
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            e.value.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Gradients concatenated in registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_elems());
        for e in &self.entries {
            out.extend_from_slice(&e.grad);
        }
        out
    }

    pub(crate) fn entries_for_checkpoint(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store
            .entries
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        let v = store
            .entries
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the store's accumulated gradients. Gradients are
    /// left untouched; callers zero them explicitly between steps.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..entry.grad.len() {
                let g = entry.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                entry.value.data[j] -=
                    lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * entry.value.data[j]);
            }
        }
    }

    pub(crate) fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
