use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Optimizer grouping of a stored tensor. Buffers hold running statistics and are
/// never touched by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Main,
    Attention,
    Buffer,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        self != ParamGroup::Buffer
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Main => 0,
            ParamGroup::Attention => 1,
            ParamGroup::Buffer => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Main),
            1 => Some(ParamGroup::Attention),
            2 => Some(ParamGroup::Buffer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named, ordered collection of model tensors. Insertion order is the canonical
/// order for optimizers, gradient checks and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::invalid("ParamStore::add", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.group.is_trainable()).map(|e| e.value.numel()).sum()
    }

    pub fn count_in_group(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.value.zero_grad());
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.value.clear_grad());
    }

    /// Replaces a value keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.numel() != data.len() {
            return Err(TensorError::shape(
                "ParamStore::set_data",
                format!("{} expects {} values, got {}", entry.name, entry.value.numel(), data.len()),
            ));
        }
        entry.value.data_mut().copy_from_slice(data);
        Ok(())
    }
}
