use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// What part of a model a parameter belongs to; drives the parameter census.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamRole {
    Embedding,
    SequenceMixer,
    ChannelMixer,
    Head,
    /// Non-trainable state such as running normalisation statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub role: ParamRole,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix, role: ParamRole) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
            role,
        }
    }

    pub fn trainable(&self) -> bool {
        self.role != ParamRole::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered, name-indexed collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter `{}`", param.name)));
        }
        let idx = self.params.len();
        self.index.insert(param.name.clone(), idx);
        self.params.push(param);
        Ok(idx)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, role: ParamRole) -> Result<usize> {
        self.insert(Parameter::new(name, value, role))
    }

    /// Drops every parameter whose name satisfies `pred`, keeping order.
    pub fn remove_where(&mut self, pred: impl Fn(&Parameter) -> bool) -> Vec<Parameter> {
        let (removed, kept): (Vec<_>, Vec<_>) = self.params.drain(..).partition(|p| pred(p));
        self.params = kept;
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        removed
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let idx = self.index_of(name)?;
        Ok(&mut self.params[idx])
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Matrix::zeros(1, 1), ParamRole::Head).unwrap();
        assert!(s.add("a", Matrix::zeros(1, 1), ParamRole::Head).is_err());
    }

    #[test]
    fn removal_reindexes() {
        let mut s = ParamStore::new();
        s.add("x.a", Matrix::zeros(1, 2), ParamRole::Head).unwrap();
        s.add("y", Matrix::zeros(2, 2), ParamRole::Buffer).unwrap();
        s.add("x.b", Matrix::zeros(3, 1), ParamRole::Head).unwrap();
        let removed = s.remove_where(|p| p.name.starts_with("x."));
        assert_eq!(removed.len(), 2);
        assert_eq!(s.index_of("y").unwrap(), 0);
        assert_eq!(s.trainable_count(), 0);
    }
}
