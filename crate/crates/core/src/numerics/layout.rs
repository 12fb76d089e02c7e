//! Shape manipulation: reshape, permute, concat, slice, flip and shift.

use super::tensor::{numel, BackwardOp, Tensor};
use super::TensorError;

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(shape, axes)`, the source index.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = numel(shape);
    let mut idx = vec![0usize; axes.len()];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

struct ReshapeOp;

impl BackwardOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct GatherOp {
    /// Source offset of every output element; each source appears at most once.
    index: Vec<usize>,
}

impl BackwardOp for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; inputs[0].numel()];
        for (&src, &v) in self.index.iter().zip(grad) {
            g[src] += v;
        }
        vec![Some(g)]
    }
}

struct ConcatOp {
    axis: usize,
}

impl BackwardOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let shape0 = inputs[0].shape();
        let outer: usize = shape0[..self.axis].iter().product();
        let inner: usize = shape0[self.axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|t| t.dim(self.axis)).sum();
        debug_assert_eq!(outer * total * inner, output.len());
        let mut start = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.dim(self.axis);
                let g = t.requires_grad().then(|| {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        g.extend_from_slice(&grad[(o * total + start) * inner..][..n * inner]);
                    }
                    g
                });
                start += n;
                g
            })
            .collect()
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], ReshapeOp))
    }

    fn gather(&self, shape: Vec<usize>, index: Vec<usize>) -> Tensor {
        let data = index.iter().map(|&i| self.data()[i]).collect();
        Tensor::from_op(shape, data, vec![self.clone()], GatherOp { index })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let mut seen = vec![false; self.rank()];
        let valid = axes.len() == self.rank()
            && axes.iter().all(|&a| a < self.rank() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("axes {axes:?} invalid for shape {:?}", self.shape()),
            });
        }
        let shape = axes.iter().map(|&a| self.dim(a)).collect();
        Ok(self.gather(shape, permute_index(self.shape(), axes)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got {:?}", self.shape()),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() || start > end || end > self.dim(axis) {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of {:?}", self.shape()),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let n = self.dim(axis);
        let mut index = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            index.extend(base..base + (end - start) * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.gather(shape, index))
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidArgument {
                op: "flip",
                reason: format!("axis {axis} out of range for {:?}", self.shape()),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let n = self.dim(axis);
        let mut index = Vec::with_capacity(self.numel());
        for o in 0..outer {
            for a in (0..n).rev() {
                let base = (o * n + a) * inner;
                index.extend(base..base + inner);
            }
        }
        Ok(self.gather(self.shape().to_vec(), index))
    }

    /// Moves elements by `offset` positions along `axis`: output position `t`
    /// takes input position `t - offset`; positions with no source are zero.
    pub fn shift(&self, axis: usize, offset: isize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidArgument {
                op: "shift",
                reason: format!("axis {axis} out of range for {:?}", self.shape()),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let n = self.dim(axis) as isize;
        let src_data = self.data();
        let mut data = vec![0.0; self.numel()];
        let mut index = Vec::new();
        let mut dst_pos = Vec::new();
        for o in 0..outer {
            for t in 0..n {
                let s = t - offset;
                if s < 0 || s >= n {
                    continue;
                }
                let dst = (o * n as usize + t as usize) * inner;
                let src = (o * n as usize + s as usize) * inner;
                for i in 0..inner {
                    data[dst + i] = src_data[src + i];
                    index.push(src + i);
                    dst_pos.push(dst + i);
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], ScatterOp { index, dst_pos }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = tensors.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no tensors given".into(),
        })?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {:?}", first.shape()),
            });
        }
        for t in &tensors[1..] {
            let compatible = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = tensors.iter().map(|t| t.dim(axis)).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let n = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, data, tensors.to_vec(), ConcatOp { axis }))
    }
}

struct ScatterOp {
    index: Vec<usize>,
    dst_pos: Vec<usize>,
}

impl BackwardOp for ScatterOp {
    fn name(&self) -> &'static str {
        "shift"
    }
    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; inputs[0].numel()];
        for (&src, &dst) in self.index.iter().zip(&self.dst_pos) {
            g[src] += grad[dst];
        }
        vec![Some(g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        Tensor::param(shape, (0..numel(shape)).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permute_transposes() {
        let x = iota(&[2, 3]);
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = iota(&[2, 3, 4]).permute(&[2, 0, 1]).unwrap();
        assert_eq!(z.shape(), &[4, 2, 3]);
        assert_eq!(z.data()[1], 4.0);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let a = iota(&[2, 2]);
        let b = iota(&[2, 3]);
        let y = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert_eq!(y.data(), &[0.0, 1.0, 0.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
        let seed: Vec<f64> = (0..10).map(|v| v as f64 * 1.5).collect();
        y.backward_with(&seed).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.5, 7.5, 9.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.5, 6.0, 10.5, 12.0, 13.5]);
    }

    #[test]
    fn slice_and_flip() {
        let x = iota(&[3, 2]);
        assert_eq!(x.slice(0, 1, 3).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(x.slice(1, 1, 2).unwrap().data(), &[1.0, 3.0, 5.0]);
        assert_eq!(x.flip(0).unwrap().data(), &[4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        assert!(x.slice(0, 2, 4).is_err());
    }

    #[test]
    fn shift_zero_fills() {
        let x = iota(&[4, 1]);
        assert_eq!(x.shift(0, 1).unwrap().data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(x.shift(0, -2).unwrap().data(), &[2.0, 3.0, 0.0, 0.0]);
        assert_eq!(x.shift(0, 9).unwrap().data(), &[0.0; 4]);
        let y = x.shift(0, 1).unwrap();
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0, 0.0]);
    }
}
