use std::collections::HashMap;

use super::array::{Array, Real};
use super::backward::Gradients;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named arrays. Insertion order is the canonical
/// order for optimizers, EMA updates and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; names are fixed by model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.arrays.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.arrays.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<T>> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<T>] {
        &mut self.arrays
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Replaces every array from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.arrays.iter_mut().zip(&other.arrays) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter sets have different entries"));
        }
        for (name, (a, b)) in self.names.iter().zip(self.arrays.iter().zip(&other.arrays)) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters recorded on a tape, one variable per entry.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Records every parameter; tracked ones receive gradients.
    pub fn new<T: Real>(tape: &Tape<T>, params: &ParamSet<T>, tracked: bool) -> Self {
        let vars = params
            .arrays()
            .iter()
            .map(|a| {
                if tracked {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        Self { vars }
    }

    /// Wraps variables already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order; entries no loss reached are zero.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> Vec<Array<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
