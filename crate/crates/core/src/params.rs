//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Parameters keyed by slash-delimited paths such as `spatial/backbone/conv3/weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        match self.entries.get(name) {
            Some(p) => Ok(&p.value),
            None => bail!(Contract, "unknown parameter {name}"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.entries.get_mut(name) {
            Some(p) => Ok(&mut p.value),
            None => bail!(Contract, "unknown parameter {name}"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Keep only entries whose name starts with one of `prefixes`.
    pub fn filtered(&self, prefixes: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameters bound into one graph, so that a name is materialized at most once per
/// forward/backward pass.
pub struct Binding<T: Real> {
    vars: BTreeMap<String, Var>,
    frozen: Vec<String>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Default for Binding<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Binding<T> {
    pub fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Parameters whose names start with any of these prefixes are bound as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn bind(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = match store.get(name) {
            Some(p) => p,
            None => bail!(Contract, "unknown parameter {name}"),
        };
        let frozen = self.frozen.iter().any(|f| name.starts_with(f.as_str()));
        let v = if p.kind == ParamKind::Trainable && !frozen {
            g.param(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter that the loss depends on.
    pub fn collect(&self, mut grads: Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}
