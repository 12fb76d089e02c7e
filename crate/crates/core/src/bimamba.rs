//! Selective state-space block with a forget gate (Mamba+), and its
//! bidirectional wrapper.
//!
//! Per channel `e` and state index `n`, with diagonal `A < 0`:
//!
//! ```text
//! Ā[t,e,n] = exp(Δ[t,e] A[e,n])
//! B̄[t,e,n] = (exp(Δ A) - 1) / (Δ A) · Δ[t,e] B[t,n]
//! h[t]     = Ā[t] ⊙ h[t-1] + B̄[t] x[t]
//! y[t,e]   = Σ_n C[t,n] h[t,e,n]
//! ```

use crate::nn::{Conv1d, Ctx, Linear};
use crate::numerics::{BackwardOp, ParamId, ParamStore, Rng, Tensor, TensorError};

/// Below this `|ΔA|` the ZOH input factor uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `(exp(u) - 1) / u`, continuous at 0.
pub fn phi(u: f64) -> f64 {
    if u.abs() < SERIES_THRESHOLD {
        1.0 + u / 2.0 + u * u / 6.0
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`phi`].
fn phi_prime(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

fn op_err(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

fn check_discretize(delta: &Tensor, a: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    let [l, e] = *delta.shape() else { return Err(op_err("discretize", format!("delta must be L × E, got {:?}", delta.shape()))) };
    let [e2, n] = *a.shape() else { return Err(op_err("discretize", format!("A must be E × N, got {:?}", a.shape()))) };
    if e != e2 {
        return Err(TensorError::ShapeMismatch { op: "discretize", lhs: delta.shape().to_vec(), rhs: a.shape().to_vec() });
    }
    if let Some(v) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(op_err("discretize", format!("step sizes must be positive, found {v}")));
    }
    Ok((l, e, n))
}

struct ZohDecayOp {
    dims: (usize, usize, usize),
}

impl BackwardOp for ZohDecayOp {
    fn name(&self) -> &'static str {
        "zoh_decay"
    }
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (l, e, n) = self.dims;
        let (delta, a) = (inputs[0].data(), inputs[1].data());
        let mut gd = vec![0.0; l * e];
        let mut ga = vec![0.0; e * n];
        for t in 0..l {
            for i in 0..e {
                let dt = delta[t * e + i];
                let mut acc = 0.0;
                for j in 0..n {
                    let k = (t * e + i) * n + j;
                    let g = grad[k] * output[k];
                    acc += g * a[i * n + j];
                    ga[i * n + j] += g * dt;
                }
                gd[t * e + i] = acc;
            }
        }
        vec![Some(gd), Some(ga)]
    }
}

struct ZohInputOp {
    dims: (usize, usize, usize),
}

impl BackwardOp for ZohInputOp {
    fn name(&self) -> &'static str {
        "zoh_input"
    }
    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (l, e, n) = self.dims;
        let (delta, a, b) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gd = vec![0.0; l * e];
        let mut ga = vec![0.0; e * n];
        let mut gb = vec![0.0; l * n];
        for t in 0..l {
            for i in 0..e {
                let dt = delta[t * e + i];
                let mut acc = 0.0;
                for j in 0..n {
                    let g = grad[(t * e + i) * n + j];
                    let u = dt * a[i * n + j];
                    let bv = b[t * n + j];
                    // d(phi(u) Δ)/dΔ = phi(u) + u phi'(u) = exp(u)
                    acc += g * bv * u.exp();
                    ga[i * n + j] += g * bv * dt * dt * phi_prime(u);
                    gb[t * n + j] += g * phi(u) * dt;
                }
                gd[t * e + i] = acc;
            }
        }
        vec![Some(gd), Some(ga), Some(gb)]
    }
}

/// Zero-order-hold discretization. `delta` is `L × E` (positive), `a` is
/// `E × N`, `b` is `L × N`; returns `(Ā, B̄)`, each `L × E × N`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    let (l, e, n) = check_discretize(delta, a)?;
    if b.shape() != [l, n] {
        return Err(TensorError::ShapeMismatch { op: "discretize", lhs: delta.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (dv, av, bv) = (delta.data(), a.data(), b.data());
    let mut abar = vec![0.0; l * e * n];
    let mut bbar = vec![0.0; l * e * n];
    for t in 0..l {
        for i in 0..e {
            let dt = dv[t * e + i];
            for j in 0..n {
                let u = dt * av[i * n + j];
                let k = (t * e + i) * n + j;
                abar[k] = u.exp();
                bbar[k] = phi(u) * dt * bv[t * n + j];
            }
        }
    }
    let dims = (l, e, n);
    let abar = Tensor::from_op(vec![l, e, n], abar, vec![delta.clone(), a.clone()], ZohDecayOp { dims });
    let bbar = Tensor::from_op(vec![l, e, n], bbar, vec![delta.clone(), a.clone(), b.clone()], ZohInputOp { dims });
    Ok((abar, bbar))
}

/// Shapes of one scan problem: `L` steps, `E` channels, `N` states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub l: usize,
    pub e: usize,
    pub n: usize,
}

/// Reference sequential recurrence. Returns `(y, h)` with `h` holding every
/// hidden state (`L × E × N`).
pub fn scan_naive(d: ScanDims, abar: &[f64], bbar: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { l, e, n } = d;
    let mut h = vec![0.0; l * e * n];
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for i in 0..e {
            let xv = x[t * e + i];
            let mut acc = 0.0;
            for j in 0..n {
                let k = (t * e + i) * n + j;
                let prev = if t == 0 { 0.0 } else { h[k - e * n] };
                h[k] = abar[k] * prev + bbar[k] * xv;
                acc += c[t * n + j] * h[k];
            }
            y[t * e + i] = acc;
        }
    }
    (y, h)
}

/// Blocked scan over the associative pairs `(a, u) ∘ (a', u') = (a a', a' u + u')`.
///
/// Each block of `block` steps is scanned from a zero state while tracking
/// its running decay product; block carries are then chained and folded
/// back in. Blocks are independent in the first and last phases.
pub fn scan_blocked(d: ScanDims, abar: &[f64], bbar: &[f64], c: &[f64], x: &[f64], block: usize) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { l, e, n } = d;
    let block = block.max(1);
    let width = e * n;
    let mut h = vec![0.0; l * width];
    let mut decay = vec![0.0; l * width];
    for start in (0..l).step_by(block) {
        let end = (start + block).min(l);
        for t in start..end {
            for i in 0..e {
                let xv = x[t * e + i];
                for j in 0..n {
                    let k = t * width + i * n + j;
                    let u = bbar[k] * xv;
                    if t == start {
                        h[k] = u;
                        decay[k] = abar[k];
                    } else {
                        h[k] = abar[k] * h[k - width] + u;
                        decay[k] = abar[k] * decay[k - width];
                    }
                }
            }
        }
    }
    // chain carries: state at the end of each block
    let mut carry = vec![0.0; width];
    for start in (0..l).step_by(block) {
        let end = (start + block).min(l);
        for t in start..end {
            for k in 0..width {
                h[t * width + k] += decay[t * width + k] * carry[k];
            }
        }
        carry.copy_from_slice(&h[(end - 1) * width..end * width]);
    }
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for i in 0..e {
            y[t * e + i] = (0..n).map(|j| c[t * n + j] * h[t * width + i * n + j]).sum();
        }
    }
    (y, h)
}

/// Default block length of the blocked scan.
pub const SCAN_BLOCK: usize = 64;

struct ScanOp {
    dims: ScanDims,
    h: Vec<f64>,
}

impl BackwardOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }
    fn backward(&self, inputs: &[Tensor], _output: &[f64], gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let ScanDims { l, e, n } = self.dims;
        let (abar, bbar, c, x) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let width = e * n;
        let h = &self.h;
        let mut ga = vec![0.0; l * width];
        let mut gb = vec![0.0; l * width];
        let mut gc = vec![0.0; l * n];
        let mut gx = vec![0.0; l * e];
        // lambda = total gradient reaching h[t]
        let mut lambda = vec![0.0; width];
        for t in (0..l).rev() {
            for i in 0..e {
                let g = gy[t * e + i];
                let xv = x[t * e + i];
                let mut gxi = 0.0;
                for j in 0..n {
                    let k = i * n + j;
                    let kt = t * width + k;
                    let next = if t + 1 < l { abar[kt + width] * lambda[k] } else { 0.0 };
                    let lam = g * c[t * n + j] + next;
                    lambda[k] = lam;
                    gc[t * n + j] += g * h[kt];
                    if t > 0 {
                        ga[kt] = lam * h[kt - width];
                    }
                    gb[kt] = lam * xv;
                    gxi += lam * bbar[kt];
                }
                gx[t * e + i] = gxi;
            }
        }
        vec![Some(ga), Some(gb), Some(gc), Some(gx)]
    }
}

/// Differentiable scan. `abar`, `bbar` are `L × E × N`, `c` is `L × N`,
/// `x` is `L × E`; returns `y` as `L × E`.
pub fn selective_scan(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
    let [l, e, n] = *abar.shape() else { return Err(op_err("selective_scan", format!("Ā must be L × E × N, got {:?}", abar.shape()))) };
    if bbar.shape() != abar.shape() || c.shape() != [l, n] || x.shape() != [l, e] {
        return Err(TensorError::ShapeMismatch { op: "selective_scan", lhs: abar.shape().to_vec(), rhs: x.shape().to_vec() });
    }
    let dims = ScanDims { l, e, n };
    let (y, h) = scan_blocked(dims, abar.data(), bbar.data(), c.data(), x.data(), SCAN_BLOCK);
    let inputs = vec![abar.clone(), bbar.clone(), c.clone(), x.clone()];
    let needs_graph = crate::numerics::grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let op = ScanOp { dims, h: if needs_graph { h } else { Vec::new() } };
    Ok(Tensor::from_op(vec![l, e], y, inputs, op))
}

/// `y ⊙ SiLU(z) + x' ⊙ (1 - σ(z))`.
pub fn forget_gate(y: &Tensor, x_conv: &Tensor, z: &Tensor) -> Result<Tensor, TensorError> {
    let keep = z.sigmoid().neg().add_scalar(1.0);
    y.mul(&z.silu())?.add(&x_conv.mul(&keep)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    /// Channel expansion `E`.
    pub expand: usize,
    /// State size `N`.
    pub state: usize,
    pub conv_kernel: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl SsmConfig {
    pub fn new(d_model: usize) -> Self {
        SsmConfig { d_model, expand: 2, state: 16, conv_kernel: 4, dt_min: 0.001, dt_max: 0.1 }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.inner().div_ceil(16)
    }
}

/// One Mamba+ branch.
#[derive(Clone, Debug)]
pub struct MambaPlus {
    pub cfg: SsmConfig,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv: Conv1d,
    pub a_log: ParamId,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub dt_bias: ParamId,
    pub out: Linear,
}

/// Intermediate values of one forward pass, for inspection.
pub struct MambaTrace {
    pub x_conv: Tensor,
    pub z: Tensor,
    pub delta: Tensor,
    pub y: Tensor,
    pub output: Tensor,
}

impl MambaPlus {
    pub fn new(store: &mut ParamStore, name: &str, cfg: SsmConfig, rng: &mut Rng) -> Result<Self, TensorError> {
        let (d, ed, n, r) = (cfg.d_model, cfg.inner(), cfg.state, cfg.dt_rank());
        let in_x = Linear::new(store, &format!("{name}.in_x"), d, ed, false, rng)?;
        let in_z = Linear::new(store, &format!("{name}.in_z"), d, ed, false, rng)?;
        let conv = Conv1d::new(store, &format!("{name}.conv"), ed, ed, cfg.conv_kernel, ed, cfg.conv_kernel - 1, 0, rng)?;
        let a_init: Vec<f64> = (0..ed).flat_map(|_| (1..=n).map(|v| (v as f64).ln())).collect();
        let a_log = store.add(format!("{name}.a_log"), &[ed, n], a_init)?;
        let proj_b = Linear::new(store, &format!("{name}.proj_b"), ed, n, false, rng)?;
        let proj_c = Linear::new(store, &format!("{name}.proj_c"), ed, n, false, rng)?;
        let dt_down = Linear::new(store, &format!("{name}.dt_down"), ed, r, false, rng)?;
        let dt_up = Linear::new(store, &format!("{name}.dt_up"), r, ed, false, rng)?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let bias: Vec<f64> = (0..ed)
            .map(|_| {
                let dt = rng.uniform_range(lo, hi).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = store.add(format!("{name}.dt_bias"), &[ed], bias)?;
        let out = Linear::new(store, &format!("{name}.out"), ed, d, false, rng)?;
        Ok(MambaPlus { cfg, in_x, in_z, conv, a_log, proj_b, proj_c, dt_down, dt_up, dt_bias, out })
    }

    pub fn param_count(cfg: &SsmConfig) -> usize {
        let (d, ed, n, r) = (cfg.d_model, cfg.inner(), cfg.state, cfg.dt_rank());
        2 * d * ed + Conv1d::param_count(ed, ed, cfg.conv_kernel, ed) + ed * n + 2 * ed * n + 2 * ed * r + ed + ed * d
    }

    /// The state matrix `A = -exp(a_log)`.
    pub fn a(&self, ctx: &Ctx) -> Tensor {
        ctx.p(self.a_log).exp().neg()
    }

    pub fn trace(&self, ctx: &Ctx, x: &Tensor) -> Result<MambaTrace, TensorError> {
        if x.rank() != 2 || x.dim(1) != self.cfg.d_model {
            return Err(TensorError::InvalidShape { op: "mamba_plus", shape: x.shape().to_vec(), reason: format!("expected L × {}", self.cfg.d_model) });
        }
        let xs = self.in_x.forward(ctx, x)?;
        let z = self.in_z.forward(ctx, x)?;
        let x_conv = self.conv.forward(ctx, &xs.transpose()?)?.transpose()?.silu();
        let b = self.proj_b.forward(ctx, &x_conv)?;
        let c = self.proj_c.forward(ctx, &x_conv)?;
        let delta = self.dt_up.forward(ctx, &self.dt_down.forward(ctx, &x_conv)?)?.add(ctx.p(self.dt_bias))?.softplus();
        let (abar, bbar) = discretize(&delta, &self.a(ctx), &b)?;
        let y = selective_scan(&abar, &bbar, &c, &x_conv)?;
        let gated = forget_gate(&y, &x_conv, &z)?;
        let output = self.out.forward(ctx, &gated)?;
        Ok(MambaTrace { x_conv, z, delta, y, output })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        Ok(self.trace(ctx, x)?.output)
    }
}

/// Forward and time-reversed Mamba+ branches fused by addition.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub forward_branch: MambaPlus,
    pub backward_branch: MambaPlus,
}

impl BiMamba {
    pub fn new(store: &mut ParamStore, name: &str, cfg: SsmConfig, rng: &mut Rng) -> Result<Self, TensorError> {
        Ok(BiMamba {
            forward_branch: MambaPlus::new(store, &format!("{name}.fwd"), cfg, rng)?,
            backward_branch: MambaPlus::new(store, &format!("{name}.bwd"), cfg, rng)?,
        })
    }

    pub fn param_count(cfg: &SsmConfig) -> usize {
        2 * MambaPlus::param_count(cfg)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let f = self.forward_branch.forward(ctx, x)?;
        let b = self.backward_branch.forward(ctx, &x.flip(0)?)?.flip(0)?;
        f.add(&b)
    }
}

/// Copies every parameter under `from` onto the same-named parameter under
/// `to` (used to tie the two branches in symmetry checks).
pub fn copy_params(store: &mut ParamStore, from: &str, to: &str) -> Result<(), TensorError> {
    for id in store.ids_with_prefix(from) {
        let target = format!("{to}{}", &store.name(id)[from.len()..]);
        let dst = store.find(&target).ok_or_else(|| op_err("copy_params", format!("no parameter {target}")))?;
        let data = store.get(id).to_vec();
        store.set(dst, data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ScanDims {
        ScanDims { l: 64, e: 8, n: 4 }
    }

    fn random_scan(seed: u64, d: ScanDims) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let m = d.l * d.e * d.n;
        (rng.uniform_vec(m, 0.0, 1.0), rng.normal_vec(m, 1.0), rng.normal_vec(d.l * d.n, 1.0), rng.normal_vec(d.l * d.e, 1.0))
    }

    #[test]
    fn closed_form_step() {
        let (abar, bbar) = discretize(
            &Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            &Tensor::new(&[1, 1], vec![-1.0]).unwrap(),
            &Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert!((abar.item() - (-1f64).exp()).abs() < 1e-15);
        assert!((bbar.item() - (1.0 - (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn series_boundary_is_continuous() {
        for u in [1e-6f64 - 1e-9, 1e-6 + 1e-9, -1e-6 - 1e-9, -1e-6 + 1e-9] {
            let exact = u.exp_m1() / u;
            assert!((phi(u) - exact).abs() < 1e-12);
        }
        assert!((phi_prime(1e-3 - 1e-9) - phi_prime(1e-3 + 1e-9)).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let d = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let a = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        assert!(discretize(&d, &a, &a).is_err());
    }

    #[test]
    fn blocked_matches_naive() {
        for seed in 0..10 {
            let (a, b, c, x) = random_scan(seed, dims());
            let (y0, h0) = scan_naive(dims(), &a, &b, &c, &x);
            for block in [1, 5, 16, 64, 100] {
                let (y1, h1) = scan_blocked(dims(), &a, &b, &c, &x, block);
                let diff = y0.iter().zip(&y1).chain(h0.iter().zip(&h1)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10, "block {block}: {diff}");
            }
        }
    }

    #[test]
    fn memoryless_and_single_step() {
        let d = ScanDims { l: 3, e: 2, n: 3 };
        let (_, b, c, x) = random_scan(1, d);
        let zeros = vec![0.0; 18];
        let (y, _) = scan_naive(d, &zeros, &b, &c, &x);
        for t in 0..3 {
            for i in 0..2 {
                let dot: f64 = (0..3).map(|j| c[t * 3 + j] * b[(t * 2 + i) * 3 + j]).sum();
                assert!((y[t * 2 + i] - dot * x[t * 2 + i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forget_gate_limits() {
        let y = Tensor::new(&[2], vec![0.7, -1.2]).unwrap();
        let xc = Tensor::new(&[2], vec![0.3, 2.0]).unwrap();
        let out = forget_gate(&y, &xc, &Tensor::full(&[2], -60.0)).unwrap();
        for (o, x) in out.data().iter().zip(xc.data()) {
            assert!((o - x).abs() < 1e-20);
        }
        let out = forget_gate(&Tensor::zeros(&[2]), &xc, &Tensor::full(&[2], 60.0)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn counts_and_shapes() {
        let cfg = SsmConfig { state: 4, ..SsmConfig::new(4) };
        let mut store = ParamStore::new();
        let m = BiMamba::new(&mut store, "bm", cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(store.count(), BiMamba::param_count(&cfg));
        let x = Tensor::new(&[6, 4], Rng::new(1).normal_vec(24, 1.0)).unwrap();
        let y = m.forward(&Ctx::eval(&store), &x).unwrap();
        assert_eq!(y.shape(), &[6, 4]);
        let delta = m.forward_branch.trace(&Ctx::eval(&store), &x).unwrap().delta;
        assert!(delta.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn dt_bias_initial_range() {
        let cfg = SsmConfig::new(8);
        let mut store = ParamStore::new();
        let m = MambaPlus::new(&mut store, "m", cfg, &mut Rng::new(0)).unwrap();
        for v in store.get(m.dt_bias).data() {
            let dt = crate::numerics::softplus(*v);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn tied_branches_commute_with_reversal() {
        let cfg = SsmConfig { state: 4, ..SsmConfig::new(4) };
        let mut store = ParamStore::new();
        let m = BiMamba::new(&mut store, "bm", cfg, &mut Rng::new(8)).unwrap();
        copy_params(&mut store, "bm.fwd", "bm.bwd").unwrap();
        let ctx = Ctx::eval(&store);
        let x = Tensor::new(&[7, 4], Rng::new(2).normal_vec(28, 1.0)).unwrap();
        let a = m.forward(&ctx, &x.flip(0).unwrap()).unwrap();
        let b = m.forward(&ctx, &x).unwrap().flip(0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
