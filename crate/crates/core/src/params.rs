//! Named parameter storage shared by all models.
//!
//! Entries keep their insertion order, which is also the order of the
//! checkpoint blob. Buffers (batch-norm running statistics) live alongside the
//! trainable tensors but are skipped by optimizers and gradient checks.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Scalar count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Copy every entry whose name starts with `prefix` from `other`.
    /// Names and shapes must line up exactly.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.entries.len() {
            if !self.entries[i].name.starts_with(prefix) {
                continue;
            }
            let name = self.entries[i].name.clone();
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("source lacks parameter {name}")))?;
            self.set(ParamId(i), other.get(src).clone())?;
            copied += 1;
        }
        Ok(copied)
    }
}

/// Normal weights scaled by fan-in: `std = gain / sqrt(fan_in)`.
pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_not_trainable() {
        let mut s = ParamStore::default();
        let w = s.add("w", Tensor::zeros(&[2, 3]));
        let rm = s.add_buffer("bn.running_mean", Tensor::zeros(&[3]));
        assert!(s.is_trainable(w));
        assert!(!s.is_trainable(rm));
        assert_eq!(s.num_trainable(), 6);
        assert_eq!(s.trainable_ids().collect::<Vec<_>>(), vec![w]);
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::default();
        let w = s.add("w", Tensor::zeros(&[2]));
        assert!(s.set(w, Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn copy_prefix_only_touches_prefix() {
        let mut a = ParamStore::default();
        a.add("backbone.w", Tensor::zeros(&[2]));
        a.add("head.w", Tensor::zeros(&[2]));
        let mut b = ParamStore::default();
        b.add("backbone.w", Tensor::full(&[2], 1.0));
        b.add("head.w", Tensor::full(&[2], 2.0));
        assert_eq!(a.copy_prefix_from(&b, "backbone.").unwrap(), 1);
        assert_eq!(a.get(a.id("backbone.w").unwrap()).data(), &[1.0, 1.0]);
        assert_eq!(a.get(a.id("head.w").unwrap()).data(), &[0.0, 0.0]);
    }
}
