use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamTensor {
    pub fn shape(&self) -> [usize; 2] {
        [self.value.rows(), self.value.cols()]
    }
}

/// Flat, ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.tensors.push(ParamTensor {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn uniform(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0].value
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Replace the value of a named tensor, checking its shape.
    pub fn load(&mut self, name: &str, shape: [usize; 2], values: Vec<f64>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Validation(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                t.shape(),
                shape
            )));
        }
        if values.len() != shape[0] * shape[1] {
            return Err(Error::Validation(format!("parameter `{name}`: value count mismatch")));
        }
        t.value = Tensor::from_vec(shape[0], shape[1], values);
        Ok(())
    }
}
