use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named, ordered collection of tensors. Used both for network weights and
/// for gradients keyed by the same names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkParams {
    entries: Vec<(String, Tensor)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Replaces an existing tensor or appends a new one.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.get_mut(name) {
            Some(t) => *t = tensor,
            None => self.entries.push((name.to_string(), tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Adds `tensor` into the entry `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, tensor: &Tensor) {
        match self.get_mut(name) {
            Some(t) => t.add_assign(tensor),
            None => self.entries.push((name.to_string(), tensor.clone())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in &mut self.entries {
            t.scale(k);
        }
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn copy_group(&mut self, other: &NetworkParams, prefix: &str) {
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.set(name, t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn group<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.iter().filter(move |(n, _)| n.starts_with(prefix))
    }
}
