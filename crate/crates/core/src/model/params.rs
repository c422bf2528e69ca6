//! Named parameter traversal and the checkpoint-level tensor store.
//!
//! Every model component enumerates its state in a fixed canonical order;
//! initialization, the optimizer, and checkpoint I/O all run off the same
//! enumeration so they can never disagree about what exists.

use std::collections::HashMap;

use super::layers::{BatchNorm, Conv2d, Linear};
use super::ModelError;
use crate::Elem;

/// Role of a state entry. Running statistics are buffers: saved and
/// restored, but not trained and not counted as parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    ConvWeight,
    ConvBias,
    FcWeight,
    FcBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl EntryKind {
    pub fn is_parameter(self) -> bool {
        !matches!(self, EntryKind::BnRunningMean | EntryKind::BnRunningVar)
    }

    /// Weight decay applies to convolution and fully-connected weights
    /// only - not biases, not batch-norm parameters.
    pub fn weight_decayed(self) -> bool {
        matches!(self, EntryKind::ConvWeight | EntryKind::FcWeight)
    }
}

/// Read-only view of one state entry.
pub struct EntryRef<'a, T> {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one state entry; `grad` is `None` for buffers.
pub struct EntryMut<'a, T> {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
}

/// Anything that exposes named state in canonical order.
pub trait HasEntries<T: Elem> {
    fn visit_entries(&self, f: &mut dyn FnMut(EntryRef<'_, T>));
    fn visit_entries_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, T>));
}

/// Total number of trainable scalars (buffers excluded).
pub fn count_parameters<T: Elem>(m: &impl HasEntries<T>) -> usize {
    let mut total = 0usize;
    m.visit_entries(&mut |e| {
        if e.kind.is_parameter() {
            total += e.data.len();
        }
    });
    total
}

impl<T: Elem> Conv2d<T> {
    pub(crate) fn yield_entries(&self, name: &str, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        f(EntryRef {
            name: format!("{name}.weight"),
            kind: EntryKind::ConvWeight,
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().unwrap(),
        });
        if let Some(b) = &self.bias {
            f(EntryRef {
                name: format!("{name}.bias"),
                kind: EntryKind::ConvBias,
                shape: b.shape().to_vec(),
                data: b.as_slice().unwrap(),
            });
        }
    }

    pub(crate) fn yield_entries_mut(&mut self, name: &str, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        let shape = self.weight.shape().to_vec();
        f(EntryMut {
            name: format!("{name}.weight"),
            kind: EntryKind::ConvWeight,
            shape,
            data: self.weight.as_slice_mut().unwrap(),
            grad: Some(self.grad_weight.as_slice_mut().unwrap()),
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            let shape = b.shape().to_vec();
            f(EntryMut {
                name: format!("{name}.bias"),
                kind: EntryKind::ConvBias,
                shape,
                data: b.as_slice_mut().unwrap(),
                grad: Some(gb.as_slice_mut().unwrap()),
            });
        }
    }
}

impl<T: Elem> BatchNorm<T> {
    pub(crate) fn yield_entries(&self, name: &str, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        let shape = vec![self.channels()];
        f(EntryRef {
            name: format!("{name}.weight"),
            kind: EntryKind::BnScale,
            shape: shape.clone(),
            data: self.gamma.as_slice().unwrap(),
        });
        f(EntryRef {
            name: format!("{name}.bias"),
            kind: EntryKind::BnShift,
            shape: shape.clone(),
            data: self.beta.as_slice().unwrap(),
        });
        f(EntryRef {
            name: format!("{name}.running_mean"),
            kind: EntryKind::BnRunningMean,
            shape: shape.clone(),
            data: self.running_mean.as_slice().unwrap(),
        });
        f(EntryRef {
            name: format!("{name}.running_var"),
            kind: EntryKind::BnRunningVar,
            shape,
            data: self.running_var.as_slice().unwrap(),
        });
    }

    pub(crate) fn yield_entries_mut(&mut self, name: &str, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        let shape = vec![self.channels()];
        f(EntryMut {
            name: format!("{name}.weight"),
            kind: EntryKind::BnScale,
            shape: shape.clone(),
            data: self.gamma.as_slice_mut().unwrap(),
            grad: Some(self.grad_gamma.as_slice_mut().unwrap()),
        });
        f(EntryMut {
            name: format!("{name}.bias"),
            kind: EntryKind::BnShift,
            shape: shape.clone(),
            data: self.beta.as_slice_mut().unwrap(),
            grad: Some(self.grad_beta.as_slice_mut().unwrap()),
        });
        f(EntryMut {
            name: format!("{name}.running_mean"),
            kind: EntryKind::BnRunningMean,
            shape: shape.clone(),
            data: self.running_mean.as_slice_mut().unwrap(),
            grad: None,
        });
        f(EntryMut {
            name: format!("{name}.running_var"),
            kind: EntryKind::BnRunningVar,
            shape,
            data: self.running_var.as_slice_mut().unwrap(),
            grad: None,
        });
    }
}

impl<T: Elem> Linear<T> {
    pub(crate) fn yield_entries(&self, name: &str, f: &mut dyn FnMut(EntryRef<'_, T>)) {
        f(EntryRef {
            name: format!("{name}.weight"),
            kind: EntryKind::FcWeight,
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().unwrap(),
        });
        f(EntryRef {
            name: format!("{name}.bias"),
            kind: EntryKind::FcBias,
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().unwrap(),
        });
    }

    pub(crate) fn yield_entries_mut(&mut self, name: &str, f: &mut dyn FnMut(EntryMut<'_, T>)) {
        let shape = self.weight.shape().to_vec();
        f(EntryMut {
            name: format!("{name}.weight"),
            kind: EntryKind::FcWeight,
            shape,
            data: self.weight.as_slice_mut().unwrap(),
            grad: Some(self.grad_weight.as_slice_mut().unwrap()),
        });
        let shape = self.bias.shape().to_vec();
        f(EntryMut {
            name: format!("{name}.bias"),
            kind: EntryKind::FcBias,
            shape,
            data: self.bias.as_slice_mut().unwrap(),
            grad: Some(self.grad_bias.as_slice_mut().unwrap()),
        });
    }
}

/// One tensor as stored in a checkpoint: shape plus row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from hierarchical parameter name to tensor. Insertion
/// order is preserved; names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<TensorData>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: TensorData) -> Result<(), ModelError> {
        if tensor.data.len() != tensor.element_count() {
            return Err(ModelError::ShapeMismatch {
                context: format!(
                    "tensor '{name}' has {} values for shape {:?}",
                    tensor.data.len(),
                    tensor.shape
                ),
            });
        }
        if self.index.contains_key(&name) {
            return Err(ModelError::ShapeMismatch {
                context: format!("duplicate tensor name '{name}'"),
            });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}
