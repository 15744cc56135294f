use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Which training phase owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Pretrained encoder/decoder weights; frozen during finetuning.
    Base,
    /// Low-rank adapter factors.
    Lora,
    /// Property embedding and conditional prior head.
    Conditional,
    /// Latent-space property predictor.
    Guidance,
}

impl ParamGroup {
    pub fn of_name(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("lora") => ParamGroup::Lora,
            Some("cond") => ParamGroup::Conditional,
            Some("guide") => ParamGroup::Guidance,
            _ => ParamGroup::Base,
        }
    }
}

/// Named parameter tensors, ordered by name. The group of each entry is
/// derived from its name prefix (`lora.`, `cond.`, `guide.`, else base).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Rc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.entries.insert(name.to_string(), Rc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Rc<Tensor<T>>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::domain(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(Rc::make_mut)
            .ok_or_else(|| Error::domain(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(move |(n, _)| ParamGroup::of_name(n) == group)
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.names().any(|n| ParamGroup::of_name(n) == group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}
