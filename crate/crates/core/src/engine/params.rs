//! Named parameter storage and the plain SGD update.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Edge identifier to filter + bias.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(ParamEntry::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    /// Bitwise equality of every stored value.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias)
            })
    }
}

/// Parameter gradients plus probe-scale gradients.
///
/// `probes` holds batch-summed probe gradients per probe site;
/// `probes_per_sample` keeps them per sample as `[n, channels]`.
#[derive(Debug, Clone, Default)]
pub struct GradientStore {
    pub params: ParamStore,
    pub probes: BTreeMap<usize, Vec<f64>>,
    pub probes_per_sample: BTreeMap<usize, Tensor>,
}

impl GradientStore {
    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|(_, e)| e.weight.is_finite() && e.bias.is_finite())
    }
}

/// In-place `p <- p - lr * g`. Nothing is written unless every gradient is
/// finite and shape-matches its parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &GradientStore, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidTensor(format!("learning rate {lr} must be positive")));
    }
    for (name, entry) in params.iter() {
        let g = grads.params.get(name).ok_or_else(|| Error::StaleForward(format!(
            "no gradient for parameter {name}"
        )))?;
        if g.weight.shape() != entry.weight.shape() {
            return Err(Error::shape(name.as_str(), entry.weight.shape(), g.weight.shape()));
        }
        if g.bias.shape() != entry.bias.shape() {
            return Err(Error::shape(name.as_str(), entry.bias.shape(), g.bias.shape()));
        }
        if !(g.weight.is_finite() && g.bias.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for (name, entry) in params.iter_mut() {
        let g = grads.params.get(name).expect("checked above");
        for (p, d) in entry.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *p -= lr * d;
        }
        for (p, d) in entry.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}
