use std::collections::HashMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Trained by the optimizer and counted as a model parameter.
    Learnable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F: Float> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<F>,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Float> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, mut tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        tensor.set_requires_grad(kind == ParamKind::Learnable);
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, tensor });
        ParamId(id)
    }

    pub fn learnable(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.insert(name, ParamKind::Learnable, tensor)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.insert(name, ParamKind::Buffer, tensor)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Learnable)
    }

    /// Total element count of the learnable tensors.
    pub fn num_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Replaces a tensor's values, keeping its kind and gradient flag.
    pub fn set_values(&mut self, id: ParamId, values: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.tensor.shape() != values.shape() {
            return Err(Error::shape(format!(
                "`{}` has shape {:?}, got {:?}",
                e.name,
                e.tensor.shape(),
                values.shape()
            )));
        }
        let requires = e.tensor.requires_grad();
        e.tensor = values;
        e.tensor.set_requires_grad(requires);
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
