//! Learnable layers shared by the network blocks, and the forward context
//! that carries parameters and the dropout stream.

use std::cell::RefCell;

use crate::numerics::{ParamId, ParamStore, Rng, Tensor, TensorError};

/// Parameters plus train/eval mode for one forward pass.
pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    dropout_rng: Option<RefCell<Rng>>,
    overrides: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    /// Inference mode: dropout is the identity.
    pub fn eval(params: &'a ParamStore) -> Self {
        Ctx { params, dropout_rng: None, overrides: Vec::new() }
    }

    /// Training mode with dropout masks drawn from `rng`.
    pub fn train(params: &'a ParamStore, rng: Rng) -> Self {
        Ctx { params, dropout_rng: Some(RefCell::new(rng)), overrides: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Substitutes `tensor` for parameter `id` in this context, so that a
    /// gradient check can differentiate with respect to a single parameter.
    pub fn with_override(mut self, id: ParamId, tensor: Tensor) -> Self {
        self.overrides.push((id, tensor));
        self
    }

    pub fn p(&self, id: ParamId) -> &Tensor {
        match self.overrides.iter().find(|(o, _)| *o == id) {
            Some((_, t)) => t,
            None => self.params.get(id),
        }
    }

    /// Inverted dropout with drop probability `rate`.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor, TensorError> {
        let Some(rng) = &self.dropout_rng else { return Ok(x.clone()) };
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        let mut rng = rng.borrow_mut();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.numel()).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
        x.mul(&Tensor::new(x.shape(), mask)?)
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
fn fan_in_uniform(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform_vec(n, -bound, bound)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], fan_in_uniform(rng, in_dim * out_dim, in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), &[out_dim], fan_in_uniform(rng, out_dim, in_dim))?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.matmul(ctx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, TensorError> {
        let gamma = store.add(format!("{name}.gamma"), &[dim], vec![1.0; dim])?;
        let beta = store.add(format!("{name}.beta"), &[dim], vec![0.0; dim])?;
        Ok(LayerNorm { gamma, beta, dim })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta))
    }
}

/// 1-D convolution over `[channels, time]` with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let fan_in = c_in / groups * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[c_out, c_in / groups, kernel],
            fan_in_uniform(rng, c_out * c_in / groups * kernel, fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), &[c_out], fan_in_uniform(rng, c_out, fan_in))?;
        Ok(Conv1d { weight, bias, groups, pad_left, pad_right })
    }

    /// Length-preserving, centered padding.
    #[allow(clippy::too_many_arguments)]
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let left = (kernel - 1) / 2;
        Self::new(store, name, c_in, c_out, kernel, groups, left, kernel - 1 - left, rng)
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize, groups: usize) -> usize {
        c_out * (c_in / groups) * kernel + c_out
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.conv1d(ctx.p(self.weight), self.groups, self.pad_left, self.pad_right)?;
        let b = ctx.p(self.bias);
        y.add(&b.reshape(&[b.numel(), 1])?)
    }
}

/// Same-padded 2-D convolution over `[channels, h, w]` with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: (usize, usize),
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            &[c_out, c_in, kernel.0, kernel.1],
            fan_in_uniform(rng, c_out * fan_in, fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), &[c_out], fan_in_uniform(rng, c_out, fan_in))?;
        Ok(Conv2d { weight, bias, kernel })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: (usize, usize)) -> usize {
        c_out * c_in * kernel.0 * kernel.1 + c_out
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.conv2d(ctx.p(self.weight), self.kernel.0 / 2, self.kernel.1 / 2)?;
        let b = ctx.p(self.bias);
        y.add(&b.reshape(&[b.numel(), 1, 1])?)
    }
}

/// Sets every listed parameter to zero (used to build degenerate test models).
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) -> Result<(), TensorError> {
    for &id in ids {
        let n = store.get(id).numel();
        store.set(id, vec![0.0; n])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_counts_and_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let lin = Linear::new(&mut store, "fc", 4, 3, true, &mut rng).unwrap();
        assert_eq!(store.count(), Linear::param_count(4, 3, true));
        let ctx = Ctx::eval(&store);
        let y = lin.forward(&ctx, &Tensor::zeros(&[5, 4])).unwrap();
        assert_eq!(y.shape(), &[5, 3]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new();
        let x = Tensor::full(&[10], 2.0);
        let y = Ctx::eval(&store).dropout(&x, 0.5).unwrap();
        assert_eq!(y.data(), x.data());
        let y = Ctx::train(&store, Rng::new(3)).dropout(&x, 0.5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 4.0));
    }
}
