//! Lightweight Conformer components: an expand-reduce FFN, a squeeze FFN,
//! pre-norm multi-head self-attention, and a convolution module whose
//! depthwise kernel sees time-shifted channel groups.
//!
//! Sequences are `L × D`. Residual connections are left to the caller.

use crate::nn::{Conv1d, Ctx, LayerNorm, Linear};
use crate::numerics::{grad_enabled, ParamStore, Rng, Tensor, TensorError};

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

/// Layer norm → D→4D → Swish → dropout → 4D→D.
#[derive(Clone, Debug)]
pub struct FfnExpand {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

pub const EXPANSION: usize = 4;

impl FfnExpand {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, dropout: f64, rng: &mut Rng) -> Result<Self, TensorError> {
        Ok(FfnExpand {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            up: Linear::new(store, &format!("{name}.up"), d, EXPANSION * d, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), EXPANSION * d, d, true, rng)?,
            dropout,
        })
    }

    pub fn param_count(d: usize) -> usize {
        LayerNorm::param_count(d) + Linear::param_count(d, EXPANSION * d, true) + Linear::param_count(EXPANSION * d, d, true)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let h = self.up.forward(ctx, &self.norm.forward(ctx, x)?)?.swish();
        let h = ctx.dropout(&h, self.dropout)?;
        self.down.forward(ctx, &h)
    }
}

/// Layer norm → D→D/2 → Swish → D/2→D.
#[derive(Clone, Debug)]
pub struct FfnSqueeze {
    pub norm: LayerNorm,
    pub squeeze: Linear,
    pub excite: Linear,
}

impl FfnSqueeze {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<Self, TensorError> {
        if d % 2 != 0 {
            return Err(invalid("ffn_squeeze", format!("width {d} must be even")));
        }
        Ok(FfnSqueeze {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            squeeze: Linear::new(store, &format!("{name}.squeeze"), d, d / 2, true, rng)?,
            excite: Linear::new(store, &format!("{name}.excite"), d / 2, d, true, rng)?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        LayerNorm::param_count(d) + Linear::param_count(d, d / 2, true) + Linear::param_count(d / 2, d, true)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let h = self.squeeze.forward(ctx, &self.norm.forward(ctx, x)?)?.swish();
        self.excite.forward(ctx, &h)
    }
}

/// Pre-norm scaled dot-product attention with `heads` heads.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Without a graph, queries are processed in blocks of this many rows so
/// that long sequences do not materialize the whole score matrix.
const QUERY_BLOCK: usize = 512;

impl Mhsa {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self, TensorError> {
        if heads == 0 || d % heads != 0 {
            return Err(invalid("mhsa", format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Mhsa {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
            heads,
            d,
        })
    }

    pub fn param_count(d: usize) -> usize {
        LayerNorm::param_count(d) + Linear::param_count(d, 3 * d, true) + Linear::param_count(d, d, true)
    }

    /// Query, key and value as `H × L × d_h` each.
    fn project(&self, ctx: &Ctx, x: &Tensor) -> Result<[Tensor; 3], TensorError> {
        let l = x.dim(0);
        let dh = self.d / self.heads;
        let qkv = self.qkv.forward(ctx, &self.norm.forward(ctx, x)?)?;
        let qkv = qkv.reshape(&[l, 3, self.heads, dh])?.permute(&[1, 2, 0, 3])?;
        let part = |i: usize| qkv.slice(0, i, i + 1)?.reshape(&[self.heads, l, dh]);
        Ok([part(0)?, part(1)?, part(2)?])
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let dh = self.d / self.heads;
        let weights = q.matmul(&k.transpose()?)?.scale(1.0 / (dh as f64).sqrt()).softmax()?;
        Ok((weights.matmul(v)?, weights))
    }

    fn merge(&self, ctx: &Ctx, heads_out: &Tensor) -> Result<Tensor, TensorError> {
        let l = heads_out.dim(1);
        let merged = heads_out.permute(&[1, 0, 2])?.reshape(&[l, self.d])?;
        self.out.forward(ctx, &merged)
    }

    /// Output plus the `H × L × L` attention weights.
    pub fn forward_with_weights(&self, ctx: &Ctx, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        self.check(x)?;
        let [q, k, v] = self.project(ctx, x)?;
        let (o, w) = self.attend(&q, &k, &v)?;
        Ok((self.merge(ctx, &o)?, w))
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        self.check(x)?;
        let l = x.dim(0);
        let [q, k, v] = self.project(ctx, x)?;
        if grad_enabled() || l <= QUERY_BLOCK {
            let (o, _) = self.attend(&q, &k, &v)?;
            return self.merge(ctx, &o);
        }
        let mut blocks = Vec::new();
        for start in (0..l).step_by(QUERY_BLOCK) {
            let qb = q.slice(1, start, (start + QUERY_BLOCK).min(l))?;
            blocks.push(self.attend(&qb, &k, &v)?.0);
        }
        self.merge(ctx, &Tensor::concat(&blocks, 1)?)
    }

    fn check(&self, x: &Tensor) -> Result<(), TensorError> {
        if x.rank() != 2 || x.dim(1) != self.d || x.dim(0) == 0 {
            return Err(TensorError::InvalidShape { op: "mhsa", shape: x.shape().to_vec(), reason: format!("expected L × {}", self.d) });
        }
        Ok(())
    }
}

/// Channel shift schedule of the convolution module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub kernel: usize,
    pub enabled: bool,
}

impl ShiftSpec {
    /// Offsets of the four shifted groups: `+k, -k, +k/2, -k/2`.
    pub fn offsets(&self) -> [isize; 4] {
        let k = self.kernel as isize;
        [k, -k, k / 2, -(k / 2)]
    }
}

/// Shifts the upper half of the channels of an `L × D` sequence along time
/// in four equal groups; the lower half passes through. Vacated frames are
/// zero.
pub fn time_shift(x: &Tensor, spec: ShiftSpec) -> Result<Tensor, TensorError> {
    let d = x.dim(1);
    if d % 8 != 0 {
        return Err(invalid("time_shift", format!("width {d} not divisible by 8")));
    }
    if !spec.enabled {
        return Ok(x.clone());
    }
    let g = d / 8;
    let mut parts = vec![x.slice(1, 0, d / 2)?];
    for (i, off) in spec.offsets().into_iter().enumerate() {
        let lo = d / 2 + i * g;
        parts.push(x.slice(1, lo, lo + g)?.shift(0, off)?);
    }
    Tensor::concat(&parts, 1)
}

/// Layer norm → D→2D → GLU → time shift → depthwise conv → layer norm →
/// Swish → D→D → dropout.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: Conv1d,
    pub conv_norm: LayerNorm,
    pub pointwise_out: Linear,
    pub shift: ShiftSpec,
    pub dropout: f64,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, shift: ShiftSpec, dropout: f64, rng: &mut Rng) -> Result<Self, TensorError> {
        if d % 8 != 0 {
            return Err(invalid("conv_module", format!("width {d} not divisible by 8")));
        }
        Ok(ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), d, 2 * d, true, rng)?,
            depthwise: Conv1d::same(store, &format!("{name}.depthwise"), d, d, shift.kernel, d, rng)?,
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), d)?,
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), d, d, true, rng)?,
            shift,
            dropout,
        })
    }

    /// Independent of whether shifts are enabled.
    pub fn param_count(d: usize, kernel: usize) -> usize {
        2 * LayerNorm::param_count(d)
            + Linear::param_count(d, 2 * d, true)
            + Conv1d::param_count(d, d, kernel, d)
            + Linear::param_count(d, d, true)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let d = x.dim(1);
        let h = self.pointwise_in.forward(ctx, &self.norm.forward(ctx, x)?)?;
        let glu = h.slice(1, 0, d)?.mul(&h.slice(1, d, 2 * d)?.sigmoid())?;
        let shifted = time_shift(&glu, self.shift)?;
        let conv = self.depthwise.forward(ctx, &shifted.transpose()?)?.transpose()?;
        let h = self.conv_norm.forward(ctx, &conv)?.swish();
        let h = self.pointwise_out.forward(ctx, &h)?;
        ctx.dropout(&h, self.dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;

    fn seq(l: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(&[l, d], Rng::new(seed).normal_vec(l * d, 1.0)).unwrap()
    }

    #[test]
    fn ffn_counts() {
        for d in [8, 16, 96] {
            let mut store = ParamStore::new();
            FfnExpand::new(&mut store, "e", d, 0.1, &mut Rng::new(0)).unwrap();
            assert_eq!(store.count(), FfnExpand::param_count(d));
            assert_eq!(FfnExpand::param_count(d), 8 * d * d + 7 * d);
            let mut store = ParamStore::new();
            FfnSqueeze::new(&mut store, "s", d, &mut Rng::new(0)).unwrap();
            assert_eq!(store.count(), FfnSqueeze::param_count(d));
            assert_eq!(2 * FfnSqueeze::param_count(d), 2 * d * d + 7 * d);
            assert!(2 * FfnSqueeze::param_count(d) < FfnExpand::param_count(d));
        }
        assert!(FfnSqueeze::new(&mut ParamStore::new(), "s", 7, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_ffn_is_zero() {
        let mut store = ParamStore::new();
        let f = FfnExpand::new(&mut store, "e", 8, 0.0, &mut Rng::new(0)).unwrap();
        let mut ids = store.ids_with_prefix("e.up");
        ids.extend(store.ids_with_prefix("e.down"));
        zero_params(&mut store, &ids).unwrap();
        let y = f.forward(&Ctx::eval(&store), &seq(3, 8, 1)).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new();
        let m = Mhsa::new(&mut store, "a", 8, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(store.count(), Mhsa::param_count(8));
        let ctx = Ctx::eval(&store);
        let (_, w) = m.forward_with_weights(&ctx, &seq(1, 8, 0)).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
        let (_, w) = m.forward_with_weights(&ctx, &seq(6, 8, 2)).unwrap();
        for row in w.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(Mhsa::new(&mut ParamStore::new(), "a", 8, 3, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn uniform_values_pass_through() {
        // with zero query/key/value weights and a fixed value bias, every
        // position attends to the same vector
        let mut store = ParamStore::new();
        let m = Mhsa::new(&mut store, "a", 4, 2, &mut Rng::new(1)).unwrap();
        store.set(m.qkv.weight, vec![0.0; 48]).unwrap();
        let mut bias = Rng::new(5).normal_vec(12, 1.0);
        bias[..8].fill(0.3);
        store.set(m.qkv.bias.unwrap(), bias.clone()).unwrap();
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        store.set(m.out.weight, w).unwrap();
        store.set(m.out.bias.unwrap(), vec![0.0; 4]).unwrap();
        let y = m.forward(&Ctx::eval(&store), &seq(5, 4, 3)).unwrap();
        for row in y.data().chunks(4) {
            for (a, b) in row.iter().zip(&bias[8..]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_attention_matches_full() {
        let mut store = ParamStore::new();
        let m = Mhsa::new(&mut store, "a", 8, 2, &mut Rng::new(1)).unwrap();
        let x = seq(QUERY_BLOCK + 37, 8, 4);
        let ctx = Ctx::eval(&store);
        let full = m.forward_with_weights(&ctx, &x).unwrap().0;
        let blocked = crate::numerics::no_grad(|| m.forward(&ctx, &x)).unwrap();
        for (a, b) in full.data().iter().zip(blocked.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_offsets_and_impulse() {
        let spec = ShiftSpec { kernel: 15, enabled: true };
        assert_eq!(spec.offsets(), [15, -15, 7, -7]);
        let (l, d) = (40, 16);
        let mut data = vec![0.0; l * d];
        data[20 * d + 8] = 1.0; // first shifted group
        let y = time_shift(&Tensor::new(&[l, d], data).unwrap(), spec).unwrap();
        assert_eq!(y.data()[35 * d + 8], 1.0);
        assert_eq!(y.data().iter().sum::<f64>(), 1.0);
        assert!(time_shift(&Tensor::zeros(&[5, 16]), spec).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(time_shift(&Tensor::zeros(&[5, 12]), spec).is_err());
    }

    #[test]
    fn shift_never_grows_norm() {
        let spec = ShiftSpec { kernel: 3, enabled: true };
        for seed in 0..10 {
            let x = seq(12, 16, seed);
            let y = time_shift(&x, spec).unwrap();
            let n = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
            assert!(n(&y) <= n(&x));
            // the unshifted half is untouched
            for t in 0..12 {
                assert_eq!(y.data()[t * 16..t * 16 + 8], x.data()[t * 16..t * 16 + 8]);
            }
        }
    }

    #[test]
    fn conv_module_counts() {
        for enabled in [true, false] {
            let mut store = ParamStore::new();
            let shift = ShiftSpec { kernel: 15, enabled };
            let c = ConvModule::new(&mut store, "c", 16, shift, 0.1, &mut Rng::new(0)).unwrap();
            assert_eq!(store.count(), ConvModule::param_count(16, 15));
            let y = c.forward(&Ctx::eval(&store), &seq(20, 16, 1)).unwrap();
            assert_eq!(y.shape(), &[20, 16]);
        }
    }
}
