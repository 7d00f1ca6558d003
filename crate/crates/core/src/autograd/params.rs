use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::mat::Mat;

/// Named trainable matrices. Slot indices are stable for the lifetime of the
/// store and double as gradient keys in [`super::Gradients`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        if let Some(&slot) = self.index.get(&name) {
            self.values[slot] = value;
            return slot;
        }
        let slot = self.values.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.values.push(value);
        slot
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.slot(name).map(|s| &self.values[s])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.slot(name).map(|s| &mut self.values[s])
    }

    pub fn value(&self, slot: usize) -> &Mat {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(slot, name, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Lazily binds store parameters into one graph, one leaf per parameter.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            frozen: false,
        }
    }

    /// A binder whose leaves are constants: nothing it binds receives gradient.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Var {
        let slot = self
            .store
            .slot(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let value = self.store.value(slot).clone();
        let v = if self.frozen {
            g.constant(value)
        } else {
            g.param(slot, value)
        };
        self.bound[slot] = Some(v);
        v
    }
}
