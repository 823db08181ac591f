//! Named parameter tensors, addressed by dense ids. The graph references
//! parameters by id so one store can back many forward passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.entries
            .get(id.0)
            .map(|e| &e.tensor)
            .ok_or(Error::UnknownParam { id: id.0 })
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(id.0)
            .map(|e| &mut e.tensor)
            .ok_or(Error::UnknownParam { id: id.0 })
    }

    pub fn name(&self, id: ParamId) -> Result<&str> {
        self.entries
            .get(id.0)
            .map(|e| e.name.as_str())
            .ok_or(Error::UnknownParam { id: id.0 })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Cast every parameter; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_lookup_by_name_works() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("w0", Tensor::zeros(&[2]));
        let b = store.add("b0", Tensor::zeros(&[1]));
        assert_eq!(a, ParamId(0));
        assert_eq!(b, ParamId(1));
        assert_eq!(store.find("b0"), Some(b));
        assert_eq!(store.find("nope"), None);
        assert_eq!(store.name(a).unwrap(), "w0");
    }

    #[test]
    fn unknown_id_is_an_error() {
        let store = ParamStore::<f32>::new();
        assert!(matches!(
            store.get(ParamId(3)),
            Err(Error::UnknownParam { id: 3 })
        ));
    }
}
