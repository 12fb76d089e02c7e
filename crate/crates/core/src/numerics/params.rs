//! Named parameter registry shared by every learnable block.

use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(TensorError::InvalidArgument { op: "param", reason: format!("duplicate parameter name {name}") });
        }
        let tensor = Tensor::param(shape, data)?;
        self.params.push(Param { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.tensor.numel()).sum()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.params[i].name.starts_with(prefix)).map(ParamId).collect()
    }

    /// Replaces the values of parameter `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<(), TensorError> {
        let shape = self.params[id.0].tensor.shape().to_vec();
        self.params[id.0].tensor = Tensor::param(&shape, data)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Gradients in registration order (`None` where nothing flowed).
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.params.iter().map(|p| p.tensor.grad()).collect()
    }

    /// Fraction of scalar parameters with a nonzero gradient.
    pub fn nonzero_grad_fraction(&self) -> f64 {
        let total = self.count();
        if total == 0 {
            return 0.0;
        }
        let nonzero: usize = self
            .params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .map(|g| g.iter().filter(|v| **v != 0.0).count())
            .sum();
        nonzero as f64 / total as f64
    }
}
