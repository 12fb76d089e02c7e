//! Residual convolutional frontend and the feature-aggregation (FA) block:
//! a temporal gate followed by a frequency gate, each computed from
//! strip convolutions over an averaged profile of the feature map.
//!
//! Feature maps are laid out `C × T × F`.

use crate::nn::{Conv1d, Conv2d, Ctx, Linear};
use crate::numerics::{ParamStore, Rng, Tensor, TensorError};

/// Frequency pooling factor applied after every residual stage.
pub const POOL: usize = 4;

fn shape_err(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape { op, shape: shape.to_vec(), reason: reason.into() }
}

/// conv3×3 → ReLU → conv3×3, plus a 1×1 projection skip, then ReLU.
#[derive(Clone, Debug)]
struct ResStage {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

impl ResStage {
    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let h = self.conv1.forward(ctx, x)?.relu();
        let h = self.conv2.forward(ctx, &h)?;
        h.add(&self.skip.forward(ctx, x)?).map(|t| t.relu())
    }

    fn param_count(c_in: usize, c_out: usize) -> usize {
        Conv2d::param_count(c_in, c_out, (3, 3)) + Conv2d::param_count(c_out, c_out, (3, 3)) + Conv2d::param_count(c_in, c_out, (1, 1))
    }
}

/// Average pooling by `factor` over the last axis of a `C × T × F` map.
pub fn pool_frequency(x: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    let [c, t, f] = *x.shape() else { return Err(shape_err("pool_frequency", x.shape(), "expected C × T × F")) };
    if f % factor != 0 {
        return Err(shape_err("pool_frequency", x.shape(), format!("{f} bins not divisible by {factor}")));
    }
    x.reshape(&[c, t, f / factor, factor])?.mean_axis(3, false)
}

#[derive(Clone, Debug)]
pub struct Frontend {
    stages: Vec<ResStage>,
    pub in_planes: usize,
    pub channels: Vec<usize>,
}

impl Frontend {
    pub fn new(store: &mut ParamStore, name: &str, in_planes: usize, channels: &[usize], rng: &mut Rng) -> Result<Self, TensorError> {
        let mut stages = Vec::new();
        let mut c_in = in_planes;
        for (i, &c) in channels.iter().enumerate() {
            let n = format!("{name}.stage{i}");
            stages.push(ResStage {
                conv1: Conv2d::new(store, &format!("{n}.conv1"), c_in, c, (3, 3), rng)?,
                conv2: Conv2d::new(store, &format!("{n}.conv2"), c, c, (3, 3), rng)?,
                skip: Conv2d::new(store, &format!("{n}.skip"), c_in, c, (1, 1), rng)?,
            });
            c_in = c;
        }
        Ok(Frontend { stages, in_planes, channels: channels.to_vec() })
    }

    pub fn param_count(in_planes: usize, channels: &[usize]) -> usize {
        let mut c_in = in_planes;
        let mut n = 0;
        for &c in channels {
            n += ResStage::param_count(c_in, c);
            c_in = c;
        }
        n
    }

    /// Bins remaining after all stages for an input with `bins` bins.
    pub fn output_bins(&self, bins: usize) -> usize {
        bins / POOL.pow(self.stages.len() as u32)
    }

    /// `features` is `planes × F × T`; the result is `C' × T × F'`.
    pub fn forward(&self, ctx: &Ctx, features: &Tensor) -> Result<Tensor, TensorError> {
        let [p, f, _] = *features.shape() else {
            return Err(shape_err("resnet_frontend", features.shape(), "expected planes × F × T"));
        };
        if p != self.in_planes {
            return Err(shape_err("resnet_frontend", features.shape(), format!("expected {} planes", self.in_planes)));
        }
        let total = POOL.pow(self.stages.len() as u32);
        if f % total != 0 {
            return Err(shape_err("resnet_frontend", features.shape(), format!("{f} bins not divisible by {total}")));
        }
        let mut x = features.permute(&[0, 2, 1])?;
        for stage in &self.stages {
            x = pool_frequency(&stage.forward(ctx, &x)?, POOL)?;
        }
        Ok(x)
    }
}

/// One gate branch: conv (C → C/r) → ReLU → conv (C/r → C) → sigmoid over a
/// `C × len` profile.
#[derive(Clone, Debug)]
pub struct StripGate {
    pub squeeze: Conv1d,
    pub excite: Conv1d,
}

impl StripGate {
    fn new(store: &mut ParamStore, name: &str, c: usize, r: usize, kernels: (usize, usize), rng: &mut Rng) -> Result<Self, TensorError> {
        let mid = (c / r).max(1);
        Ok(StripGate {
            squeeze: Conv1d::same(store, &format!("{name}.squeeze"), c, mid, kernels.0, 1, rng)?,
            excite: Conv1d::same(store, &format!("{name}.excite"), mid, c, kernels.1, 1, rng)?,
        })
    }

    fn param_count(c: usize, r: usize, kernels: (usize, usize)) -> usize {
        let mid = (c / r).max(1);
        Conv1d::param_count(c, mid, kernels.0, 1) + Conv1d::param_count(mid, c, kernels.1, 1)
    }

    pub fn forward(&self, ctx: &Ctx, profile: &Tensor) -> Result<Tensor, TensorError> {
        let h = self.squeeze.forward(ctx, profile)?.relu();
        Ok(self.excite.forward(ctx, &h)?.sigmoid())
    }
}

/// Sequential temporal then frequency gating.
#[derive(Clone, Debug)]
pub struct FaBlock {
    pub temporal: StripGate,
    pub frequency: StripGate,
    pub channels: usize,
}

/// Kernel sizes of the two strip convolutions in each branch.
pub const TEMPORAL_KERNELS: (usize, usize) = (5, 3);
pub const FREQUENCY_KERNELS: (usize, usize) = (5, 3);

impl FaBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self, TensorError> {
        Ok(FaBlock {
            temporal: StripGate::new(store, &format!("{name}.temporal"), channels, reduction, TEMPORAL_KERNELS, rng)?,
            frequency: StripGate::new(store, &format!("{name}.frequency"), channels, reduction, FREQUENCY_KERNELS, rng)?,
            channels,
        })
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        StripGate::param_count(channels, reduction, TEMPORAL_KERNELS) + StripGate::param_count(channels, reduction, FREQUENCY_KERNELS)
    }

    /// Returns the gated map and the `C × T` gate.
    pub fn temporal_attention(&self, ctx: &Ctx, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let [c, t, _] = *x.shape() else { return Err(shape_err("temporal_attention", x.shape(), "expected C × T × F")) };
        let profile = x.mean_axis(2, false)?;
        let gate = self.temporal.forward(ctx, &profile)?;
        Ok((x.mul(&gate.reshape(&[c, t, 1])?)?, gate))
    }

    /// Returns the gated map and the `C × F` gate.
    pub fn frequency_attention(&self, ctx: &Ctx, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let [c, _, f] = *x.shape() else { return Err(shape_err("frequency_attention", x.shape(), "expected C × T × F")) };
        let profile = x.mean_axis(1, false)?;
        let gate = self.frequency.forward(ctx, &profile)?;
        Ok((x.mul(&gate.reshape(&[c, 1, f])?)?, gate))
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let (xt, _) = self.temporal_attention(ctx, x)?;
        Ok(self.frequency_attention(ctx, &xt)?.0)
    }
}

/// Flattens each frame of a `C × T × F` map to `C·F` values and projects
/// them to the model width, giving a `T × D` sequence.
pub fn to_sequence(ctx: &Ctx, proj: &Linear, x: &Tensor) -> Result<Tensor, TensorError> {
    let [c, t, f] = *x.shape() else { return Err(shape_err("to_sequence", x.shape(), "expected C × T × F")) };
    if c * f != proj.in_dim {
        return Err(shape_err("to_sequence", x.shape(), format!("flattened width {} != projection input {}", c * f, proj.in_dim)));
    }
    let flat = x.permute(&[1, 0, 2])?.reshape(&[t, c * f])?;
    proj.forward(ctx, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;

    fn block(c: usize) -> (ParamStore, FaBlock) {
        let mut store = ParamStore::new();
        let fa = FaBlock::new(&mut store, "fa", c, 4, &mut Rng::new(2)).unwrap();
        (store, fa)
    }

    fn random_map(c: usize, t: usize, f: usize, seed: u64) -> Tensor {
        Tensor::new(&[c, t, f], Rng::new(seed).normal_vec(c * t * f, 1.0)).unwrap()
    }

    #[test]
    fn frontend_shapes() {
        let mut store = ParamStore::new();
        let fe = Frontend::new(&mut store, "fe", 4, &[4, 4, 8], &mut Rng::new(1)).unwrap();
        assert_eq!(store.count(), Frontend::param_count(4, &[4, 4, 8]));
        let x = Tensor::zeros(&[4, 256, 5]);
        let y = fe.forward(&Ctx::eval(&store), &x).unwrap();
        assert_eq!(y.shape(), &[8, 5, 4]);
        assert!(y.all_finite());
        assert!(fe.forward(&Ctx::eval(&store), &Tensor::zeros(&[4, 100, 5])).is_err());
    }

    #[test]
    fn zero_gates_halve() {
        let (mut store, fa) = block(8);
        let ids = store.ids_with_prefix("");
        zero_params(&mut store, &ids).unwrap();
        let x = random_map(8, 6, 4, 3);
        let ctx = Ctx::eval(&store);
        let (xt, gate) = fa.temporal_attention(&ctx, &x).unwrap();
        assert!(gate.data().iter().all(|g| *g == 0.5));
        for (a, b) in xt.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let (xf, _) = fa.frequency_attention(&ctx, &xt).unwrap();
        for (a, b) in xf.data().iter().zip(xt.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn gates_bounded_and_shrinking() {
        let (store, fa) = block(8);
        let ctx = Ctx::eval(&store);
        for seed in 0..20 {
            let x = random_map(8, 7, 4, seed);
            let (xt, wt) = fa.temporal_attention(&ctx, &x).unwrap();
            let (xf, wf) = fa.frequency_attention(&ctx, &xt).unwrap();
            assert!(wt.data().iter().chain(wf.data()).all(|g| *g > 0.0 && *g < 1.0));
            assert!(xt.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
            assert!(xf.data().iter().zip(xt.data()).all(|(a, b)| a.abs() <= b.abs()));
        }
    }

    #[test]
    fn frequency_gate_ignores_frame_order() {
        let (store, fa) = block(8);
        let ctx = Ctx::eval(&store);
        let x = random_map(8, 6, 4, 9);
        let (_, w) = fa.frequency_attention(&ctx, &x).unwrap();
        let (_, w_flipped) = fa.frequency_attention(&ctx, &x.flip(1).unwrap()).unwrap();
        for (a, b) in w.data().iter().zip(w_flipped.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn block_params_match_formula() {
        let (store, _) = block(16);
        let mid = 4;
        let per_branch = (16 * mid * 5 + mid) + (mid * 16 * 3 + 16);
        assert_eq!(store.count(), 2 * per_branch);
        assert_eq!(FaBlock::param_count(16, 4), 2 * per_branch);
    }

    #[test]
    fn sequence_projection() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "proj", 8, 4, true, &mut Rng::new(0)).unwrap();
        // identity on the first four flattened inputs
        let mut w = vec![0.0; 32];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        store.set(proj.weight, w).unwrap();
        store.set(proj.bias.unwrap(), vec![0.0; 4]).unwrap();
        let x = random_map(2, 3, 4, 5);
        let y = to_sequence(&Ctx::eval(&store), &proj, &x).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        for t in 0..3 {
            for j in 0..4 {
                assert_eq!(y.data()[t * 4 + j], x.data()[t * 4 + j]);
            }
        }
    }
}
