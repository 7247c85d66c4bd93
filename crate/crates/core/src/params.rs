//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic order of names, which keeps checkpoints and optimizer
/// sweeps deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Result<Bound, TensorError> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), tape.param(name, value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Weight matrix drawn from uniform(−1/√fan_in, 1/√fan_in).
    pub fn init_linear<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(
            name,
            Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"),
        );
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) {
        self.insert(name, Tensor::full(shape, T::lit(value)));
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `name`. Panics on a name the model never initialized,
    /// which is a programming error rather than a data error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Joins a module prefix and a local parameter name.
pub(crate) fn pname(prefix: &str, local: &str) -> String {
    if prefix.is_empty() {
        local.to_string()
    } else {
        format!("{prefix}.{local}")
    }
}
