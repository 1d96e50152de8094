use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics, init flags) are stored but not optimized.
    pub trainable: bool,
}

/// Named parameters and buffers of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for `{}`",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_size(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Overwrite values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "parameter count {} != {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    /// Flatten the trainable parameters into one vector (store order).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    pub fn unflatten_trainable(&mut self, flat: &[f64]) {
        let mut off = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

enum StoreRef<'a> {
    Shared(&'a ParamStore),
    Exclusive(&'a mut ParamStore),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, data-dependent initialization.
    Train,
    /// Frozen statistics; required for encode/decode.
    Frozen,
}

/// One evaluation: a tape plus the parameters bound into it.
pub struct Ctx<'a> {
    pub g: Graph,
    store: StoreRef<'a>,
    mode: Mode,
    track_grads: bool,
    bound: HashMap<ParamId, Var>,
    trace: Vec<(String, Var)>,
}

impl<'a> Ctx<'a> {
    /// Frozen evaluation over a shared store; parameters are constants.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store: StoreRef::Shared(store),
            mode: Mode::Frozen,
            track_grads: false,
            bound: HashMap::new(),
            trace: Vec::new(),
        }
    }

    /// Evaluation that records parameter gradients.
    pub fn with_grads(store: &'a ParamStore, mode: Mode) -> Self {
        Self { mode, track_grads: true, ..Self::frozen(store) }
    }

    /// Training evaluation; may update buffers in place.
    pub fn train(store: &'a mut ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store: StoreRef::Exclusive(store),
            mode: Mode::Train,
            track_grads: true,
            bound: HashMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }

    /// Mutable store access; `None` unless the context was built with [`Ctx::train`].
    pub fn store_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.store {
            StoreRef::Shared(_) => None,
            StoreRef::Exclusive(s) => Some(s),
        }
    }

    /// Bind a parameter into the tape (once per context).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store().get(id).clone();
        let trainable = self.store().is_trainable(id);
        let v = if self.track_grads && trainable { self.g.input(value) } else { self.g.constant(value) };
        self.bound.insert(id, v);
        v
    }

    /// Forget a binding after the stored value changed (data-dependent init).
    pub fn rebind(&mut self, id: ParamId) -> Var {
        self.bound.remove(&id);
        self.param(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Label an intermediate for non-finite diagnostics.
    pub fn trace(&mut self, label: impl Into<String>, v: Var) {
        self.trace.push((label.into(), v));
    }

    /// First traced intermediate that holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.trace
            .iter()
            .find(|(_, v)| !self.g.value(*v).all_finite())
            .map(|(l, _)| l.as_str())
    }

    /// Gradients for every bound trainable parameter.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
