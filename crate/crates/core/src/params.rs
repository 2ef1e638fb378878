//! Named parameter storage and the forward-pass session.
//!
//! Modules hold [`PId`] handles into a [`ParamStore`]; parameter names are
//! dot-separated module paths ("decoder.pfr.q.weight"). A [`Session`] binds
//! store entries onto an autodiff tape on first use and remembers the
//! binding so gradients can be collected back per parameter after backward.

use std::collections::BTreeMap;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Elem, Tensor};

/// Handle to one named parameter tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct PId(usize);

impl PId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Rebuild a handle from a store index; valid only for indices obtained
    /// from the same store.
    pub fn from_index(index: usize) -> Self {
        PId(index)
    }
}

pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
    by_name: BTreeMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> PId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        PId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: PId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<PId> {
        self.by_name.get(name).copied().map(PId)
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> u64 {
        self.values.iter().map(|t| t.numel() as u64).sum()
    }

    /// Replace a parameter's value; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<(), String> {
        let Some(&idx) = self.by_name.get(name) else {
            return Err(format!("unknown parameter {name}"));
        };
        if self.values[idx].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} cannot be replaced by {:?}",
                self.values[idx].shape(),
                value.shape()
            ));
        }
        self.values[idx] = value;
        Ok(())
    }

    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// One forward pass: a tape plus the store bindings made during it.
pub struct Session<'s, E: Elem> {
    pub tape: Tape<E>,
    store: &'s ParamStore<E>,
    bound: Vec<Option<Var>>,
}

impl<'s, E: Elem> Session<'s, E> {
    pub fn new(store: &'s ParamStore<E>, threads: usize) -> Self {
        Session {
            tape: Tape::new(threads),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Session that records values only; for inference and profiling.
    pub fn eval(store: &'s ParamStore<E>, threads: usize) -> Self {
        Session {
            tape: Tape::eval(threads),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    /// Bind a parameter onto the tape (memoized per session).
    pub fn param(&mut self, id: PId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let var = self.tape.leaf(self.store.value(id).clone(), true);
        self.bound[id.index()] = Some(var);
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.tape.value(v)
    }

    /// Gradients for every bound parameter, indexed like the store.
    pub fn parameter_gradients(&self, grads: &mut Gradients<E>) -> Vec<Option<Tensor<E>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|var| grads.take(var)))
            .collect()
    }
}
