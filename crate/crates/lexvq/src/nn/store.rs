use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered map from hierarchical parameter name to tensor.
///
/// Iteration order is registration order, which makes initialization,
/// optimizer sweeps, and checkpoints deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    by_name: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!(
                "parameter '{name}' registered twice"
            )));
        }
        self.by_name.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get(name).copied().map(|i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Replaces the value of an existing parameter, keeping shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{name}'")))?;
        if t.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                left: t.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *t = value.with_requires_grad(true);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.values {
            t.clear_grad();
        }
    }

    /// Bitwise equality of every entry, name and value.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Tracks which parameters were leased onto a tape during one forward pass,
/// so their gradients can be pulled back into the store after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    bound: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leases `name` from the store onto the tape; repeated binds of the
    /// same name return the same tape node.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.by_name.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{name}'")))?;
        let v = tape.leaf(t);
        self.bound.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Accumulates each bound parameter's tape gradient into the store.
    /// Parameters bound but unreached by backward receive explicit zeros,
    /// so "touched by the graph" and "updated" stay distinguishable from
    /// "detached entirely".
    pub fn harvest(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.bound {
            let g = tape.grad_or_zeros(*var);
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter '{name}'")))?;
            t.accumulate_grad(&g);
        }
        Ok(())
    }
}
