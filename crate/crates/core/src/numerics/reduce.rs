//! Reductions and the normalizations built on them.

use super::tensor::{BackwardOp, Tensor};
use super::TensorError;

/// `(outer, axis, inner)` extents for iterating over one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(), TensorError> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

struct SumAxisOp {
    axis: usize,
    scale: f64,
}

impl BackwardOp for SumAxisOp {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, n, inner) = split_axis(inputs[0].shape(), self.axis);
        let mut g = vec![0.0; inputs[0].numel()];
        for o in 0..outer {
            for a in 0..n {
                let dst = &mut g[(o * n + a) * inner..][..inner];
                let src = &grad[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * self.scale);
            }
        }
        vec![Some(g)]
    }
}

struct SumAllOp {
    scale: f64,
}

impl BackwardOp for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].numel()])]
    }
}

struct SoftmaxOp;

impl BackwardOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = *inputs[0].shape().last().unwrap();
        let mut g = vec![0.0; output.len()];
        for ((gi, yi), go) in g.chunks_mut(n).zip(output.chunks(n)).zip(grad.chunks(n)) {
            let dot: f64 = yi.iter().zip(go).map(|(y, g)| y * g).sum();
            for j in 0..n {
                gi[j] = yi[j] * (go[j] - dot);
            }
        }
        vec![Some(g)]
    }
}

struct LayerNormOp {
    /// Normalized activations `(x - mean) / std`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BackwardOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let n = gamma.numel();
        let gam = gamma.data();
        let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
        let mut gg = gamma.requires_grad().then(|| vec![0.0; n]);
        let mut gbeta = beta.requires_grad().then(|| vec![0.0; n]);
        let mut dxhat = vec![0.0; n];
        for (row, (go, xh)) in grad.chunks(n).zip(self.xhat.chunks(n)).enumerate() {
            if let Some(gg) = gg.as_mut() {
                gg.iter_mut().zip(go.iter().zip(xh)).for_each(|(a, (g, h))| *a += g * h);
            }
            if let Some(gb) = gbeta.as_mut() {
                gb.iter_mut().zip(go).for_each(|(a, g)| *a += g);
            }
            if let Some(gx) = gx.as_mut() {
                for j in 0..n {
                    dxhat[j] = go[j] * gam[j];
                }
                let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dh = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                let dst = &mut gx[row * n..(row + 1) * n];
                for j in 0..n {
                    dst[j] = self.inv_std[row] * (dxhat[j] - mean_d - xh[j] * mean_dh);
                }
            }
        }
        vec![gx, gg, gbeta]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    /// Sum over `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor, TensorError> {
        self.reduce_axis(axis, keepdim, 1.0)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor, TensorError> {
        check_axis("mean_axis", self, axis)?;
        let n = self.dim(axis).max(1);
        self.reduce_axis(axis, keepdim, 1.0 / n as f64)
    }

    fn reduce_axis(&self, axis: usize, keepdim: bool, scale: f64) -> Result<Tensor, TensorError> {
        check_axis("sum_axis", self, axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for a in 0..n {
                let src = &x[(o * n + a) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(shape, out, vec![self.clone()], SumAxisOp { axis, scale }))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], SumAllOp { scale: 1.0 })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(vec![], vec![s], vec![self.clone()], SumAllOp { scale: 1.0 / n })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor, TensorError> {
        let Some(&n) = self.shape().last() else {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: vec![],
                reason: "softmax needs at least one axis".into(),
            });
        };
        let mut out = self.to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], SoftmaxOp))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
        let n = self.shape().last().copied().unwrap_or(0);
        if gamma.shape() != [n] || beta.shape() != [n] || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / n;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (g, b) = (gamma.data(), beta.data());
        for (r, row) in self.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            LayerNormOp { xhat, inv_std },
        ))
    }
}
