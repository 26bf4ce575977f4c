use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// A trainable tensor and its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable parameters plus non-trainable buffers (running
/// statistics). Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if p.grad.shape() != g.shape() {
            return Err(NnError::Shape(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                name,
                g.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every parameter and buffer of `other` whose name and shape
    /// match an entry here. Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        for (name, b) in self.buffers.iter_mut() {
            if let Some(src) = other.buffers.get(name) {
                if src.shape() == b.shape() {
                    *b = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Glorot-uniform initialised weight.
    pub fn init_xavier<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, v));
    }
}
