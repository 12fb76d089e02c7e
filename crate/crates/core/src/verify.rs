//! Finite-difference gradient suite over every differentiable op and block.
//!
//! Each check reduces the output to a scalar with fixed random weights, so
//! that every output coordinate contributes to the gradient, and compares
//! the reverse-mode gradient with central differences. Blocks are checked
//! with respect to their input and to every parameter.

use crate::bimamba::{discretize, forget_gate, selective_scan, MambaPlus, SsmConfig};
use crate::fa_block::{pool_frequency, FaBlock};
use crate::nn::{Ctx, Linear};
use crate::numerics::{
    finite_difference_report, finite_difference_report_with, no_grad, relative_error, GradReport, ParamStore, Rng, Stencil, Tensor,
    TensorError,
};
use crate::seconformer::{time_shift, ConvModule, FfnExpand, FfnSqueeze, Mhsa, ShiftSpec};
use crate::stateformer::{doa_head, DyTanh, StateformerConfig, StateformerLayer};
use crate::training::pit_mse_loss;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Step of the five-point stencil used for the block checks.
pub const BLOCK_STEP: f64 = 3e-3;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
/// Rounding budget, in ulps of the objective, behind [`resolution`].
pub const RESOLUTION_ULPS: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Op,
    Block,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub level: Level,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of coordinates differentiated.
    pub coords: usize,
    /// Coordinates where both gradients are below the stencil's resolution.
    pub zero_coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn weighted(y: &Tensor, seed: u64) -> Result<Tensor, TensorError> {
    let w = Tensor::new(y.shape(), Rng::labeled(seed, "gradcheck-weights").normal_vec(y.numel(), 1.0))?;
    Ok(y.mul(&w)?.sum_all())
}

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, Rng::labeled(seed, "gradcheck-input").uniform_vec(n, lo, hi)).expect("shape matches data")
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, Rng::labeled(seed, "gradcheck-input").normal_vec(n, 1.0)).expect("shape matches data")
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from ReLU kinks.
fn off_zero(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = Rng::labeled(seed, "gradcheck-input");
    let v = (0..n).map(|_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 { -m } else { m }
    });
    Tensor::new(shape, v.collect()).expect("shape matches data")
}

struct Suite {
    results: Vec<CheckResult>,
    seed: u64,
}

impl Suite {
    fn op<F>(&mut self, name: &str, x: Tensor, f: F) -> Result<(), TensorError>
    where
        F: Fn(&Tensor) -> Result<Tensor, TensorError>,
    {
        self.seed += 1;
        let seed = self.seed;
        let report = finite_difference_report(|t| weighted(&f(t)?, seed), &x, FD_STEP)?;
        self.results.push(CheckResult {
            name: name.to_string(),
            level: Level::Op,
            max_rel_err: report.max_rel_err,
            tolerance: OP_TOLERANCE,
            coords: x.numel(),
            zero_coords: 0,
        });
        Ok(())
    }

    /// Checks `f` with respect to `x` and to every parameter in `store`.
    fn block<F>(&mut self, name: &str, store: &ParamStore, x: &Tensor, f: F) -> Result<(), TensorError>
    where
        F: Fn(&Ctx, &Tensor) -> Result<Tensor, TensorError>,
    {
        self.seed += 1;
        let seed = self.seed;
        let value = no_grad(|| weighted(&f(&Ctx::eval(store), x)?, seed))?.item();
        let floor = resolution(value);
        let report = finite_difference_report_with(|t| weighted(&f(&Ctx::eval(store), t)?, seed), x, BLOCK_STEP, Stencil::FivePoint)?;
        let (mut worst, mut zeros) = resolved_error(&report, floor);
        let mut coords = x.numel();
        for p in store.iter() {
            let id = store.find(&p.name).expect("registered parameter");
            let report = finite_difference_report_with(
                |t| weighted(&f(&Ctx::eval(store).with_override(id, t.clone()), x)?, seed),
                &p.tensor,
                BLOCK_STEP,
                Stencil::FivePoint,
            )?;
            let (err, z) = resolved_error(&report, floor);
            worst = worst.max(err);
            zeros += z;
            coords += p.tensor.numel();
        }
        self.results.push(CheckResult {
            name: name.to_string(),
            level: Level::Block,
            max_rel_err: worst,
            tolerance: BLOCK_TOLERANCE,
            coords,
            zero_coords: zeros,
        });
        Ok(())
    }
}

/// Smallest derivative the five-point stencil resolves for an objective of
/// magnitude `value`: rounding in each evaluation is a few ulps of `value`,
/// amplified by `1/h`.
fn resolution(value: f64) -> f64 {
    RESOLUTION_ULPS * f64::EPSILON * value.abs().max(1.0) / BLOCK_STEP
}

/// Maximum relative error over coordinates, skipping those where both
/// estimates are below `floor` (both agree the derivative vanishes). Also
/// returns how many were skipped.
fn resolved_error(r: &GradReport, floor: f64) -> (f64, usize) {
    let mut zeros = 0;
    let mut worst = 0.0f64;
    for (a, n) in r.analytic.iter().zip(&r.numeric) {
        if a.abs() <= floor && n.abs() <= floor {
            zeros += 1;
        } else {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    (worst, zeros)
}

fn op_checks(s: &mut Suite) -> Result<(), TensorError> {
    let c34 = normal(1, &[3, 4]);
    let row = normal(2, &[4]);
    let col = uniform(3, &[3, 1], 0.5, 1.5);
    s.op("add", normal(4, &[3, 4]), |x| x.add(&row))?;
    s.op("add_broadcast_grad", normal(5, &[4]), |x| c34.add(x))?;
    s.op("sub", normal(6, &[3, 4]), |x| c34.sub(x))?;
    s.op("mul", normal(7, &[3, 1]), |x| c34.mul(x))?;
    s.op("div_numerator", normal(8, &[3, 4]), |x| x.div(&col))?;
    s.op("div_denominator", uniform(9, &[3, 1], 0.5, 1.5), |x| c34.div(x))?;
    s.op("affine", normal(10, &[5]), |x| Ok(x.affine(1.7, -0.3)))?;
    s.op("neg", normal(11, &[5]), |x| Ok(x.neg()))?;
    s.op("exp", normal(12, &[5]), |x| Ok(x.exp()))?;
    s.op("expm1", normal(13, &[5]), |x| Ok(x.expm1()))?;
    s.op("ln", uniform(14, &[5], 0.5, 2.0), |x| Ok(x.ln()))?;
    s.op("sqrt", uniform(15, &[5], 0.5, 2.0), |x| Ok(x.sqrt()))?;
    s.op("square", normal(16, &[5]), |x| Ok(x.square()))?;
    s.op("sigmoid", normal(17, &[5]), |x| Ok(x.sigmoid()))?;
    s.op("tanh", normal(18, &[5]), |x| Ok(x.tanh()))?;
    s.op("relu", off_zero(19, &[6]), |x| Ok(x.relu()))?;
    s.op("silu", normal(20, &[5]), |x| Ok(x.silu()))?;
    s.op("softplus", normal(21, &[5]), |x| Ok(x.softplus()))?;

    let b45 = normal(22, &[4, 5]);
    s.op("matmul_lhs", normal(23, &[3, 4]), |x| x.matmul(&b45))?;
    s.op("matmul_rhs", normal(24, &[4, 5]), |x| c34.matmul(x))?;
    let w1 = normal(25, &[4, 2, 3]);
    let x1 = normal(26, &[4, 7]);
    s.op("conv1d_input", x1.clone(), |x| x.conv1d(&w1, 2, 2, 0))?;
    s.op("conv1d_weight", w1.clone(), |w| x1.conv1d(w, 2, 1, 1))?;
    let w2 = normal(27, &[3, 2, 3, 3]);
    let x2 = normal(28, &[2, 4, 5]);
    s.op("conv2d_input", x2.clone(), |x| x.conv2d(&w2, 1, 1))?;
    s.op("conv2d_weight", w2.clone(), |w| x2.conv2d(w, 1, 1))?;

    s.op("sum_axis", normal(29, &[2, 3, 4]), |x| x.sum_axis(1, false))?;
    s.op("mean_axis", normal(30, &[2, 3, 4]), |x| x.mean_axis(2, true))?;
    s.op("sum_all", normal(31, &[2, 3]), |x| Ok(x.sum_all()))?;
    s.op("mean_all", normal(32, &[2, 3]), |x| Ok(x.mean_all()))?;
    s.op("softmax", normal(33, &[3, 5]), |x| x.softmax())?;
    let gamma = normal(34, &[5]);
    let beta = normal(35, &[5]);
    let xn = normal(36, &[3, 5]);
    s.op("layer_norm_input", xn.clone(), |x| x.layer_norm(&gamma, &beta))?;
    s.op("layer_norm_gamma", gamma.clone(), |g| xn.layer_norm(g, &beta))?;
    s.op("layer_norm_beta", beta.clone(), |b| xn.layer_norm(&gamma, b))?;

    s.op("reshape", normal(37, &[2, 6]), |x| x.reshape(&[3, 4]))?;
    s.op("permute", normal(38, &[2, 3, 4]), |x| x.permute(&[2, 0, 1]))?;
    s.op("transpose", normal(39, &[3, 4]), |x| x.transpose())?;
    s.op("slice", normal(40, &[5, 3]), |x| x.slice(0, 1, 4))?;
    s.op("flip", normal(41, &[5, 3]), |x| x.flip(0))?;
    s.op("shift", normal(42, &[6, 2]), |x| x.shift(0, -2))?;
    let other = normal(43, &[2, 3]);
    s.op("concat", normal(44, &[4, 3]), |x| Tensor::concat(&[other.clone(), x.clone()], 0))?;
    s.op("pool_frequency", normal(45, &[2, 3, 8]), |x| pool_frequency(x, 4))?;
    s.op("time_shift", normal(46, &[10, 8]), |x| time_shift(x, ShiftSpec { kernel: 3, enabled: true }))?;

    let (l, e, n) = (6, 3, 2);
    let delta = uniform(47, &[l, e], 0.05, 0.8);
    let a = uniform(48, &[e, n], -2.0, -0.3);
    let bm = normal(49, &[l, n]);
    let both = |(abar, bbar): (Tensor, Tensor)| Tensor::concat(&[abar, bbar], 0);
    s.op("zoh_delta", delta.clone(), |d| both(discretize(d, &a, &bm)?))?;
    s.op("zoh_a", a.clone(), |m| both(discretize(&delta, m, &bm)?))?;
    s.op("zoh_b", bm.clone(), |m| both(discretize(&delta, &a, m)?))?;
    let tiny = uniform(50, &[l, e], 2e-4, 5e-4);
    s.op("zoh_small_step", tiny, |d| both(discretize(d, &a, &bm)?))?;

    let abar = uniform(51, &[l, e, n], 0.3, 0.95);
    let bbar = normal(52, &[l, e, n]);
    let cm = normal(53, &[l, n]);
    let xs = normal(54, &[l, e]);
    s.op("scan_abar", abar.clone(), |t| selective_scan(t, &bbar, &cm, &xs))?;
    s.op("scan_bbar", bbar.clone(), |t| selective_scan(&abar, t, &cm, &xs))?;
    s.op("scan_c", cm.clone(), |t| selective_scan(&abar, &bbar, t, &xs))?;
    s.op("scan_x", xs.clone(), |t| selective_scan(&abar, &bbar, &cm, t))?;

    let gy = normal(55, &[4, 3]);
    let gx = normal(56, &[4, 3]);
    let gz = normal(57, &[4, 3]);
    s.op("forget_gate_y", gy.clone(), |t| forget_gate(t, &gx, &gz))?;
    s.op("forget_gate_x", gx.clone(), |t| forget_gate(&gy, t, &gz))?;
    s.op("forget_gate_z", gz.clone(), |t| forget_gate(&gy, &gx, t))?;
    Ok(())
}

/// Replaces every parameter with `N(0, 0.3²)` draws. Initial values leave
/// many gradients at or near zero (zero biases, unit gains, tiny SSM step
/// sizes), which would hide errors in those paths.
fn redraw(store: &mut ParamStore, seed: u64) -> Result<(), TensorError> {
    for i in 0..store.len() {
        let id = crate::numerics::ParamId(i);
        let values = Rng::labeled(seed, store.name(id)).normal_vec(store.get(id).numel(), 0.3);
        store.set(id, values)?;
    }
    Ok(())
}

/// Sequence length and model width of the block checks.
const L: usize = 8;
const D: usize = 16;

fn block_checks(s: &mut Suite) -> Result<(), TensorError> {
    let mut rng = Rng::labeled(7, "gradcheck-blocks");
    let seq = normal(100, &[L, D]);

    let mut st = ParamStore::new();
    let fa = FaBlock::new(&mut st, "fa", 8, 4, &mut rng)?;
    let map = normal(101, &[8, L, 8]);
    redraw(&mut st, 1)?;
    s.block("fa_temporal_gate", &st, &map, |c, x| Ok(fa.temporal_attention(c, x)?.0))?;
    s.block("fa_frequency_gate", &st, &map, |c, x| Ok(fa.frequency_attention(c, x)?.0))?;

    let mut st = ParamStore::new();
    let ffn = FfnExpand::new(&mut st, "ffn", D, 0.1, &mut rng)?;
    redraw(&mut st, 2)?;
    s.block("ffn_expand", &st, &seq, |c, x| ffn.forward(c, x))?;

    let mut st = ParamStore::new();
    let sq = FfnSqueeze::new(&mut st, "sq", D, &mut rng)?;
    redraw(&mut st, 3)?;
    s.block("ffn_squeeze", &st, &seq, |c, x| sq.forward(c, x))?;

    let mut st = ParamStore::new();
    let att = Mhsa::new(&mut st, "mhsa", D, 4, &mut rng)?;
    redraw(&mut st, 4)?;
    s.block("mhsa", &st, &seq, |c, x| att.forward(c, x))?;

    let mut st = ParamStore::new();
    let conv = ConvModule::new(&mut st, "conv", D, ShiftSpec { kernel: 3, enabled: true }, 0.1, &mut rng)?;
    redraw(&mut st, 5)?;
    s.block("conv_module_shifted", &st, &seq, |c, x| conv.forward(c, x))?;

    let mut st = ParamStore::new();
    let ssm = SsmConfig { state: 4, ..SsmConfig::new(D) };
    let mamba = MambaPlus::new(&mut st, "mamba", ssm, &mut rng)?;
    redraw(&mut st, 6)?;
    s.block("mamba_plus", &st, &seq, |c, x| mamba.forward(c, x))?;

    let mut st = ParamStore::new();
    let dt = DyTanh::new(&mut st, "dytanh", D, 0.5)?;
    redraw(&mut st, 7)?;
    s.block("dytanh", &st, &seq, |c, x| dt.forward(c, x))?;

    let mut st = ParamStore::new();
    let cfg = StateformerConfig { d_model: D, heads: 2, conv_kernel: 3, ssm_state: 4, ..StateformerConfig::desk() };
    let layer = StateformerLayer::new(&mut st, "layer", &cfg, 0, &mut rng)?;
    redraw(&mut st, 8)?;
    s.block("stateformer_layer", &st, &seq, |c, x| layer.forward(c, x))?;

    let mut st = ParamStore::new();
    let head = Linear::new(&mut st, "head", D, 6, true, &mut rng)?;
    redraw(&mut st, 9)?;
    s.block("doa_head", &st, &seq, |c, x| doa_head(c, &head, x, 2))?;

    let st = ParamStore::new();
    let target: Vec<f64> = normal(104, &[L, 2, 3]).to_vec();
    let mask: Vec<f64> = (0..2 * L).map(|i| if i % 5 == 3 { 0.0 } else { 1.0 }).collect();
    let pred = normal(105, &[L, 2, 3]);
    s.block("pit_mse_loss", &st, &pred, |_, x| {
        pit_mse_loss(x, &target, &mask).map(|p| p.loss).map_err(|e| TensorError::InvalidArgument { op: "pit_mse_loss", reason: e.to_string() })
    })?;
    Ok(())
}

/// Runs the op-level checks, then the block-level checks.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>, TensorError> {
    let mut s = Suite { results: Vec::new(), seed: 0 };
    op_checks(&mut s)?;
    block_checks(&mut s)?;
    Ok(s.results)
}
