use std::collections::{BTreeMap, HashMap};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    /// Optimizer parameter group, e.g. `"hash"`, `"mlp"`, `"id"`.
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Owns every trainable array of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.clone(), group: group.into(), value, grad, requires_grad: true });
        self.by_name.insert(name, id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward result into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    /// Freezes or unfreezes every parameter in `group`.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.requires_grad = trainable;
            }
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Copies values of identically named and shaped parameters from `other`.
    /// Returns the names copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }

    /// Snapshot of all values keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dimension(
                format!("parameter {name}"),
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}
