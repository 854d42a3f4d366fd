//! Named parameter storage shared by the backbone, decoder and semantic heads.
//!
//! Parameters live outside the computation graph; each forward pass creates
//! cheap reference-counted leaves from the store. Buffers (batch-norm running
//! statistics) are stored alongside learnable tensors but never receive
//! gradients.

use std::collections::HashMap;

use ndarray::{ArcArray, ArrayD, IxDyn};

use crate::scalar::Scalar;

pub type SharedTensor<T> = ArcArray<T, IxDyn>;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Param(pub(crate) usize);

struct Entry<T: Scalar> {
    name: String,
    value: SharedTensor<T>,
    learnable: bool,
}

/// Flat, insertion-ordered collection of named tensors.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor; names must be unique across the store.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, learnable: bool) -> Param {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry {
            name,
            value: value.into_shared(),
            learnable,
        });
        Param(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, p: Param) -> &SharedTensor<T> {
        &self.entries[p.0].value
    }

    pub fn name(&self, p: Param) -> &str {
        &self.entries[p.0].name
    }

    pub fn is_learnable(&self, p: Param) -> bool {
        self.entries[p.0].learnable
    }

    pub fn lookup(&self, name: &str) -> Option<Param> {
        self.by_name.get(name).copied().map(Param)
    }

    /// Replaces a tensor's contents (shape must match).
    pub fn set_value(&mut self, p: Param, value: ArrayD<T>) {
        assert_eq!(
            self.entries[p.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.entries[p.0].name
        );
        self.entries[p.0].value = value.into_shared();
    }

    /// In-place update of a uniquely held tensor (clones on write when shared).
    pub fn update_value(&mut self, p: Param, f: impl FnOnce(&mut ArrayD<T>)) {
        let mut owned = self.entries[p.0].value.to_owned();
        f(&mut owned);
        self.entries[p.0].value = owned.into_shared();
    }

    pub fn set_learnable(&mut self, p: Param, learnable: bool) {
        self.entries[p.0].learnable = learnable;
    }

    pub fn params(&self) -> impl Iterator<Item = Param> + '_ {
        (0..self.entries.len()).map(Param)
    }

    pub fn learnable(&self) -> Vec<Param> {
        self.params().filter(|&p| self.is_learnable(p)).collect()
    }

    /// Total scalar count across learnable tensors.
    pub fn learnable_scalars(&self) -> usize {
        self.learnable()
            .iter()
            .map(|&p| self.value(p).len())
            .sum()
    }
}
