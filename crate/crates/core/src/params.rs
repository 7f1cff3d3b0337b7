//! Named parameter tensors.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;
use crate::real::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Insertion order is stable and is
/// the order used by the optimizer and by checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Records a leaf on `tape` for every parameter accepted by `filter`.
    pub fn bind(&self, tape: &mut Tape<T>, filter: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| filter(n).then(|| tape.leaf(t.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }
}

/// Tape variables for the bound subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    /// Panics if `id` was not bound.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter not bound on this tape")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
