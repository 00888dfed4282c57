//! Named parameter and gradient collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Ordered map from parameter path (e.g. `backbone.stage1.conv.weight`) to
/// tensor. Iteration is always sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Sub-collection of entries whose name starts with `prefix`, with the
    /// prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Errors unless both sets have identical key sets and shapes.
    pub fn check_aligned(&self, other: &ParamSet<T>, what: &str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure(format!(
                "{what}: key counts differ ({} vs {})",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Structure(format!("{what}: key {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Structure(format!(
                    "{what}: shapes differ for {na}: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Gradients of a scalar loss, keyed like the [`ParamSet`] they differentiate.
pub type GradSet<T = f32> = ParamSet<T>;
