use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<S> {
    pub tensor: Tensor<S>,
    /// Buffers such as normalization running statistics are not trainable.
    pub trainable: bool,
}

/// Every tensor of a model addressed by a dotted path, iterated in
/// lexicographic order so checkpoints and optimizer state are stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorSet<S> {
    entries: BTreeMap<String, Entry<S>>,
}

impl<S: Scalar> NamedTensorSet<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) {
        self.entries.insert(name.into(), Entry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::contract(format!("unknown tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::contract(format!("unknown tensor `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<S>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the value of an existing tensor, keeping its flag.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::dim(
                "set",
                name.to_string(),
                format!("{:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_numel(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> NamedTensorSet<T> {
        NamedTensorSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Zero tensors shaped like every trainable entry.
    pub fn zeros_like_trainable(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.trainable)
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: Tensor::zeros(e.tensor.shape()),
                            trainable: true,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Global L2 norm over all entries.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.tensor.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for e in self.entries.values_mut() {
            for v in e.tensor.data_mut() {
                *v *= factor;
            }
        }
    }
}
