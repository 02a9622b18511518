//! Named parameter storage and per-forward binding into a graph.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics, updated outside the optimiser.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Insertion-ordered parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            kind,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of learnable scalars.
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian payloads of `ids`.
    pub fn digest(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform(−√(1/fan_in), +√(1/fan_in)).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound));
        let full = self.full(name);
        self.store.insert(&full, t, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.insert(&full, Tensor::full(shape, value), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.insert(&full, Tensor::full(shape, value), ParamKind::Buffer)
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One forward/backward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    frozen: Vec<bool>,
    grad_enabled: bool,
    bn_obs: RefCell<Vec<BnObservation>>,
}

impl<'a> Session<'a> {
    /// Session where every weight is trainable.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_frozen(store, &[])
    }

    /// Session where the listed parameters enter as constants.
    pub fn with_frozen(store: &'a ParamStore, frozen: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in frozen {
            mask[id.0] = true;
        }
        Session {
            g: Graph::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            frozen: mask,
            grad_enabled: true,
            bn_obs: RefCell::new(Vec::new()),
        }
    }

    /// Gradient-free session.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut s = Self::train(store);
        s.grad_enabled = false;
        s
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph handle for a parameter, bound on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let trainable = self.grad_enabled && !self.frozen[id.0] && e.kind == ParamKind::Weight;
        let v = self.g.leaf(e.value.clone(), trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Binds `id` to `value` as a constant instead of the stored tensor.
    /// Panics when the parameter is already bound in this session.
    pub fn bind_value(&self, id: ParamId, value: Tensor) -> Var {
        assert!(!self.is_bound(id), "parameter {} already bound", self.store.entry(id).name);
        assert_eq!(value.shape(), self.store.get(id).shape(), "override shape");
        let v = self.g.constant(value);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.0].is_some()
    }

    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub(crate) fn observe_bn(&self, obs: BnObservation) {
        self.bn_obs.borrow_mut().push(obs);
    }

    pub fn take_bn_observations(&self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_obs.borrow_mut())
    }

    /// Gradients of every bound trainable parameter, in id order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.g.requires_grad(v) {
                    return None;
                }
                let g = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.store.entries[i].value.numel()]);
                Some((ParamId(i), g))
            })
            .collect()
    }
}

/// Exponential-moving-average update of running statistics (unbiased variance).
pub fn apply_bn_observations(store: &mut ParamStore, obs: &[BnObservation], momentum: f64) {
    for o in obs {
        let correction = if o.count > 1 {
            o.count as f64 / (o.count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in store.get_mut(o.running_mean).data_mut().iter_mut().zip(&o.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(o.running_var).data_mut().iter_mut().zip(&o.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, &[]);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let id = b.sub("layer").uniform("w", &[16, 4], 16);
        assert_eq!(store.entry(id).name, "layer.w");
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn frozen_and_buffers_bind_as_constants() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(1.0), ParamKind::Weight);
        let b = store.insert("b", Tensor::scalar(2.0), ParamKind::Weight);
        let c = store.insert("c", Tensor::scalar(3.0), ParamKind::Buffer);
        let s = Session::with_frozen(&store, &[b]);
        let y = s.g.mul(s.p(a), s.p(b)).unwrap();
        let y = s.g.mul(y, s.p(c)).unwrap();
        let grads = s.g.backward(y).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg, vec![(a, vec![6.0])]);
        assert!(s.is_bound(a) && s.is_bound(c));
    }

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(1.0), ParamKind::Weight);
        let d0 = store.digest([a]);
        assert_eq!(d0, store.digest([a]));
        store.get_mut(a).data_mut()[0] = 1.5;
        assert_ne!(d0, store.digest([a]));
    }
}
