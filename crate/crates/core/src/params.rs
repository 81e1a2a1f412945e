//! Named parameter tensors with deterministic ordering and checksums.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A set of named f64 tensors. Iteration order is the lexicographic name
/// order, which fixes the optimizer-state pairing and the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter: {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy every entry whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Tape handles for one store's tensors, registered exactly once per step so
/// gradients of reused weights accumulate on a single node.
#[derive(Debug)]
pub struct Binding {
    vars: BTreeMap<String, crate::autodiff::Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> crate::autodiff::Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &crate::autodiff::Var)> {
        self.vars.iter()
    }
}

/// Register every tensor of `store` on the tape. `trainable` decides whether
/// gradients are tracked (params) or blocked (constant leaves).
pub fn bind(tape: &mut crate::autodiff::Tape, store: &ParamStore, trainable: bool) -> Binding {
    let mut vars = BTreeMap::new();
    for (name, value) in store.iter() {
        let v = if trainable {
            tape.param(value.clone())
        } else {
            tape.leaf(value.clone())
        };
        vars.insert(name.clone(), v);
    }
    Binding { vars }
}

impl FromIterator<(String, ArrayD<f64>)> for ParamStore {
    fn from_iter<T: IntoIterator<Item = (String, ArrayD<f64>)>>(iter: T) -> Self {
        ParamStore {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn checksum_changes_with_content() {
        let mut a = ParamStore::new();
        a.insert("w", arr1(&[1.0, 2.0]).into_dyn());
        let c1 = a.checksum();
        a.insert("w", arr1(&[1.0, 2.5]).into_dyn());
        assert_ne!(c1, a.checksum());
    }

    #[test]
    fn subset_filters_by_prefix() {
        let mut a = ParamStore::new();
        a.insert("backbone.c1", arr1(&[1.0]).into_dyn());
        a.insert("proj.w", arr1(&[2.0]).into_dyn());
        let b = a.subset("backbone.");
        assert_eq!(b.len(), 1);
        assert!(b.contains("backbone.c1"));
    }
}
