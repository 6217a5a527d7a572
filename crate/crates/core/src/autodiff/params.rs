use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::graph::Graph;
use crate::error::{Error, Result};

/// Named parameter arrays in deterministic (lexicographic) order.
///
/// A frozen store binds into graphs as constants, so nothing computed from it
/// can move its values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    #[serde(default)]
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Gradients of every parameter bound into `graph`, zeros where nothing
    /// flowed. Keys follow the store's order.
    pub fn gradients(&self, graph: &Graph) -> BTreeMap<String, Array> {
        let bound: BTreeMap<&str, _> = graph.bound_params().collect();
        self.params
            .iter()
            .map(|(name, value)| {
                let g = bound
                    .get(name.as_str())
                    .and_then(|v| graph.grad(*v).cloned())
                    .unwrap_or_else(|| Array::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Keeps only parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            frozen: self.frozen,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_orders() {
        let mut s = ParamStore::new();
        s.insert("b", Array::zeros(&[2, 3])).unwrap();
        s.insert("a", Array::zeros(&[4])).unwrap();
        assert_eq!(s.num_elements(), 10);
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
        assert!(s.insert("a", Array::zeros(&[1])).is_err());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::new();
        s.insert("w", Array::vector(vec![1.0, 2.0])).unwrap();
        s.freeze();
        let mut g = Graph::train();
        let w = g.param(&s, "w").unwrap();
        assert!(!g.requires_grad(w));
        let root = g.sum(w);
        g.backward(root).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn shared_name_binds_once() {
        let mut s = ParamStore::new();
        s.insert("e", Array::vector(vec![1.0])).unwrap();
        let mut g = Graph::train();
        assert_eq!(g.param(&s, "e").unwrap(), g.param(&s, "e").unwrap());
    }
}
