use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of parameters shared by every network in a
/// model bundle. Insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    // Removed parameters leave a `None` slot so outstanding ids stay valid.
    params: Vec<Option<Parameter>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Some(Parameter {
            name,
            value,
            trainable,
            grad: None,
        }));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        self.params[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        self.params[id.0].as_mut().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    fn live_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut().flatten()
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.live_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.live_mut() {
            p.grad = None;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Copies of every parameter value whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Parameter> {
        let p = self.params.get_mut(id.0)?.take()?;
        self.by_name.remove(&p.name);
        Some(p)
    }
}
