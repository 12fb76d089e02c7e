//! Matrix products and convolutions.

use super::tensor::{BackwardOp, Tensor};
use super::TensorError;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored row-major as `m×k` (or `k×m` when `ta`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted buffer lengths cover every index addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

impl BackwardOp for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
        if !self.b_batched {
            // Fold the batch into rows: A is (batch*m)×k.
            let rows = self.batch * m;
            if let Some(ga) = ga.as_mut() {
                gemm(rows, n, k, grad, false, b.data(), true, ga, false);
            }
            if let Some(gb) = gb.as_mut() {
                gemm(k, rows, n, a.data(), true, grad, false, gb, false);
            }
        } else {
            for bi in 0..self.batch {
                let g = &grad[bi * m * n..(bi + 1) * m * n];
                let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
                if let Some(ga) = ga.as_mut() {
                    gemm(m, n, k, g, false, bd, true, &mut ga[bi * m * k..(bi + 1) * m * k], false);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, m, n, ad, true, g, false, &mut gb[bi * k * n..(bi + 1) * k * n], false);
                }
            }
        }
        vec![ga, gb]
    }
}

impl Tensor {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`; `other` is either `[k, n]` (shared across all
    /// leading axes) or has the same leading axes as `self`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.dim(self.rank() - 2), self.dim(self.rank() - 1));
        let (k2, n) = (other.dim(other.rank() - 2), other.dim(other.rank() - 1));
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &self.shape()[..self.rank() - 2];
        let batch: usize = lead.iter().product();
        let b_batched = other.rank() > 2;
        if b_batched && other.shape()[..other.rank() - 2] != *lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        if b_batched {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..],
                    false,
                    &other.data()[bi * k * n..],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        } else {
            gemm(batch * m, k, n, self.data(), false, other.data(), false, &mut out, false);
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            MatmulOp { batch, m, k, n, b_batched },
        ))
    }
}

/// Geometry of a 1-D convolution over `[batch, c_in, len]`.
#[derive(Clone, Copy, Debug)]
struct Conv1dGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    groups: usize,
    pad_left: usize,
    out_len: usize,
}

impl Conv1dGeom {
    /// Range of output positions `t` for which `t + k - pad_left` is inside the input.
    fn valid(&self, k: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(k);
        let hi = (self.len + self.pad_left).saturating_sub(k).min(self.out_len);
        (lo, hi.max(lo))
    }
}

struct Conv1dOp(Conv1dGeom);

impl BackwardOp for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = self.0;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let cin_g = g.c_in / g.groups;
        let cout_g = g.c_out / g.groups;
        let mut gx = inputs[0].requires_grad().then(|| vec![0.0; x.len()]);
        let mut gw = inputs[1].requires_grad().then(|| vec![0.0; w.len()]);
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let grp = co / cout_g;
                let go = &grad[(b * g.c_out + co) * g.out_len..][..g.out_len];
                for cl in 0..cin_g {
                    let ci = grp * cin_g + cl;
                    let xoff = (b * g.c_in + ci) * g.len;
                    for k in 0..g.kernel {
                        let widx = (co * cin_g + cl) * g.kernel + k;
                        let (lo, hi) = g.valid(k);
                        let shift = k as isize - g.pad_left as isize;
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = 0.0;
                            for t in lo..hi {
                                acc += go[t] * x[(xoff as isize + t as isize + shift) as usize];
                            }
                            gw[widx] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = w[widx];
                            for t in lo..hi {
                                gx[(xoff as isize + t as isize + shift) as usize] += wv * go[t];
                            }
                        }
                    }
                }
            }
        }
        vec![gx, gw]
    }
}

/// Column buffer for a stride-1 2-D convolution of one image `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = oi as isize + ki as isize - ph as isize;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..][..w];
                    let (lo, hi) = valid_columns(kj, pw, w, wo);
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        line[lo..hi].copy_from_slice(&src[lo + kj - pw..hi + kj - pw]);
                    }
                }
            }
        }
    }
}

/// Output columns `oj` whose input column `oj + kj - pw` lies in `0..w`.
fn valid_columns(kj: usize, pw: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(kj).min(wo);
    let hi = (w + pw).saturating_sub(kj).min(wo).max(lo);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = oi as isize + ki as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + ii as usize) * w..][..w];
                    let (lo, hi) = valid_columns(kj, pw, w, wo);
                    if lo < hi {
                        let line = &src[oi * wo..][lo..hi];
                        for (d, s) in dst[lo + kj - pw..hi + kj - pw].iter_mut().zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

struct Conv2dOp(Conv2dGeom);

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = self.0;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let krows = g.c_in * g.kh * g.kw;
        let plane = g.ho * g.wo;
        let mut cols = vec![0.0; krows * plane];
        let mut dcols = vec![0.0; krows * plane];
        let mut gx = inputs[0].requires_grad().then(|| vec![0.0; x.len()]);
        let mut gw = inputs[1].requires_grad().then(|| vec![0.0; w.len()]);
        for b in 0..g.batch {
            let xb = &x[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
            let gb = &grad[b * g.c_out * plane..][..g.c_out * plane];
            if let Some(gw) = gw.as_mut() {
                im2col(xb, g.c_in, g.h, g.w, g.kh, g.kw, g.ph, g.pw, g.ho, g.wo, &mut cols);
                gemm(g.c_out, plane, krows, gb, false, &cols, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(krows, g.c_out, plane, w, true, gb, false, &mut dcols, false);
                let gxb = &mut gx[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
                col2im(&dcols, g.c_in, g.h, g.w, g.kh, g.kw, g.ph, g.pw, g.ho, g.wo, gxb);
            }
        }
        vec![gx, gw]
    }
}

impl Tensor {
    /// Stride-1 1-D convolution (cross-correlation).
    ///
    /// `self` is `[c_in, len]` or `[batch, c_in, len]`; `weight` is
    /// `[c_out, c_in / groups, kernel]`. The input is zero-padded by
    /// `pad_left` and `pad_right` samples.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (batch, c_in, len) = match *self.shape() {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => return Err(mismatch()),
        };
        let [c_out, cin_g, kernel] = *weight.shape() else { return Err(mismatch()) };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(mismatch());
        }
        if len + pad_left + pad_right < kernel {
            return Err(TensorError::InvalidShape {
                op: "conv1d",
                shape: self.shape().to_vec(),
                reason: format!("padded length shorter than kernel {kernel}"),
            });
        }
        let out_len = len + pad_left + pad_right - kernel + 1;
        let geom = Conv1dGeom { batch, c_in, len, c_out, kernel, groups, pad_left, out_len };
        let (x, w) = (self.data(), weight.data());
        let cout_g = c_out / groups;
        let mut out = vec![0.0; batch * c_out * out_len];
        for b in 0..batch {
            for co in 0..c_out {
                let grp = co / cout_g;
                let dst = &mut out[(b * c_out + co) * out_len..][..out_len];
                for cl in 0..cin_g {
                    let ci = grp * cin_g + cl;
                    let xoff = (b * c_in + ci) * len;
                    for k in 0..kernel {
                        let wv = w[(co * cin_g + cl) * kernel + k];
                        let (lo, hi) = geom.valid(k);
                        let shift = k as isize - pad_left as isize;
                        let base = (xoff as isize + shift) as usize;
                        for t in lo..hi {
                            dst[t] += wv * x[base.wrapping_add(t)];
                        }
                    }
                }
            }
        }
        let shape = if self.rank() == 2 { vec![c_out, out_len] } else { vec![batch, c_out, out_len] };
        Ok(Tensor::from_op(shape, out, vec![self.clone(), weight.clone()], Conv1dOp(geom)))
    }

    /// Stride-1 2-D convolution. `self` is `[c_in, h, w]` or `[batch, c_in, h, w]`;
    /// `weight` is `[c_out, c_in, kh, kw]`; zero padding `(ph, pw)` on both sides.
    pub fn conv2d(&self, weight: &Tensor, ph: usize, pw: usize) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (batch, c_in, h, w) = match *self.shape() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(mismatch()),
        };
        let [c_out, c_in2, kh, kw] = *weight.shape() else { return Err(mismatch()) };
        if c_in2 != c_in || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(mismatch());
        }
        let (ho, wo) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
        let geom = Conv2dGeom { batch, c_in, h, w, c_out, kh, kw, ph, pw, ho, wo };
        let krows = c_in * kh * kw;
        let plane = ho * wo;
        let mut cols = vec![0.0; krows * plane];
        let mut out = vec![0.0; batch * c_out * plane];
        for b in 0..batch {
            let xb = &self.data()[b * c_in * h * w..][..c_in * h * w];
            im2col(xb, c_in, h, w, kh, kw, ph, pw, ho, wo, &mut cols);
            gemm(c_out, krows, plane, weight.data(), false, &cols, false, &mut out[b * c_out * plane..][..c_out * plane], false);
        }
        let shape = if self.rank() == 3 { vec![c_out, ho, wo] } else { vec![batch, c_out, ho, wo] };
        Ok(Tensor::from_op(shape, out, vec![self.clone(), weight.clone()], Conv2dOp(geom)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let ta = Tensor::new(&[2, 3], a.clone()).unwrap();
        let tb = Tensor::new(&[3, 4], b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn conv1d_identity_kernel_and_padding() {
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = x.conv1d(&w, 1, 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        // causal: a kernel selecting the oldest tap delays by two samples
        let w = Tensor::new(&[1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = x.conv1d(&w, 1, 2, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 0.37).cos()).collect();
        let k: Vec<f64> = (0..3 * c * 9).map(|v| (v as f64 * 0.11).sin()).collect();
        let tx = Tensor::new(&[c, h, w], x.clone()).unwrap();
        let tk = Tensor::new(&[3, c, 3, 3], k.clone()).unwrap();
        let y = tx.conv2d(&tk, 1, 1).unwrap();
        for co in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..3 {
                            for b in 0..3 {
                                let (ii, jj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += k[((co * c + ci) * 3 + a) * 3 + b] * x[(ci * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(co * h + i) * w + j] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
