//! Named parameter tensors with a frozen set, and their per-pass binding
//! onto a tape.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.contains(name) {
            return Err(Error::config(format!("cannot freeze unknown parameter `{name}`")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !self.frozen.contains(*k))
            .cloned()
            .collect()
    }

    /// Total scalar count of parameters whose names satisfy `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(k, _)| pred(k)).map(|(_, t)| t.numel()).sum()
    }

    /// Inserts a `[rows, cols]` matrix drawn from `N(0, std²)`.
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng) {
        let t = rng.normal_tensor(shape).map(|v| v * std);
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Records every parameter on `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants. With `differentiable = false`
    /// everything is a constant.
    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if differentiable && !self.frozen.contains(k) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// A binding over handles recorded elsewhere, e.g. by a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Binding {
        Binding {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.0));
        p.insert("b", Tensor::scalar(3.0));
        p.freeze("b").unwrap();
        let mut tape = Tape::new();
        let bind = p.bind(&mut tape, true);
        let y = tape.mul(bind.get("a").unwrap(), bind.get("b").unwrap()).unwrap();
        let mut g = tape.backward(y).unwrap();
        let grads = bind.collect_grads(&mut g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].data(), &[3.0]);
    }

    #[test]
    fn freeze_unknown_is_error() {
        assert!(ParamStore::new().freeze("nope").is_err());
    }
}
