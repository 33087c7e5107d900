use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which fixes the layout of checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTable<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for a [`ParamTable`] registered on one tape.
pub type ParamVars = BTreeMap<String, Var>;

impl<T: Scalar> ParamTable<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
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

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: ParamTable<T>) -> Result<()> {
        for (name, value) in other.entries {
            self.insert(name, value)?;
        }
        Ok(())
    }

    /// Registers every tensor as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect()
    }

    /// Same as [`ParamTable::register`] but as constants.
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.constant(value.clone())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTable<U> {
        ParamTable {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

pub(crate) fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("parameter {name} not registered")))
}
