//! Named trainable tensors shared between models, the optimizer, and
//! checkpoints.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor within a [`ParamSet`]; stable for the life of the set.
pub type ParamId = usize;

/// Ordered collection of named parameter tensors. Registration order
/// defines the flattening order used by gradient checks and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.tensors[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.id_of(name)
            .map(|id| &self.tensors[id])
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// In-place update; copies only if a graph still holds the tensor.
    pub fn apply(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor)) {
        f(Arc::make_mut(&mut self.tensors[id]));
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        debug_assert_eq!(tensor.shape(), self.tensors[id].shape());
        self.tensors[id] = Arc::new(tensor);
    }

    /// Total number of scalar values across all tensors.
    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Replace every tensor's values from a flat vector in registration
    /// order. Shapes are preserved.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_values() {
            return Err(Error::InvalidInput(format!(
                "flat vector has {} values, parameter set holds {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            let shape = t.shape().to_vec();
            *t = Arc::new(Tensor::new(shape, flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut ps = ParamSet::new();
        ps.register("a", Tensor::vector(vec![1.0, 2.0]));
        ps.register("b", Tensor::scalar(3.0));
        let flat = ps.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        ps.load_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(ps.by_name("a").unwrap().data(), &[4.0, 5.0]);
        assert_eq!(ps.by_name("b").unwrap().item(), 6.0);
        assert!(ps.load_flat(&[1.0]).is_err());
    }
}
