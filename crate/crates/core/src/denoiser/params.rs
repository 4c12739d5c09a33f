use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors; the order is part of the model
/// layout and is preserved by checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    entries: Vec<NamedTensor>,
}

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

impl Parameters {
    pub fn new(entries: Vec<NamedTensor>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, index: usize) -> &NamedTensor {
        &self.entries[index]
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut NamedTensor {
        &mut self.entries[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape().to_vec()),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn ensure_same_layout(&self, other: &Parameters) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.len()],
                found: vec![other.len()],
            });
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::InvalidArgument(format!(
                    "parameter layout mismatch: expected `{}`, found `{}`",
                    a.name, b.name
                )));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    expected: a.tensor.shape().to_vec(),
                    found: b.tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.is_finite())
            .map(|e| e.name.as_str())
    }
}
