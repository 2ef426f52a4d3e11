use std::collections::{BTreeMap, HashMap};

use crate::numeric::{Matrix, Rng, Tape, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols()))).collect(),
        }
    }

    /// Records every tensor on `tape`; those selected by `trainable` become
    /// gradient-receiving leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, value)| {
                let var = if trainable(name) { tape.param(value.clone()) } else { tape.constant(value.clone()) };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape variables for a [`ParamSet`].
pub struct BoundParams<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Panics when `name` was not bound; parameter names are fixed by the
    /// model layout.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Matrix with entries uniform in `[-bound, bound)`.
pub(crate) fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().iter_mut().for_each(|v| *v = rng.symmetric(bound));
    m
}
