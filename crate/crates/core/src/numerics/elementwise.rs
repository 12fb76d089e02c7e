//! Broadcasting binary arithmetic and pointwise nonlinearities.

use super::tensor::{BackwardOp, Tensor};
use super::TensorError;

/// Result shape of numpy-style broadcasting, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading `shape` as if it had been broadcast to `target`.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Source offset in `shape` for every element of `target` (row-major).
fn broadcast_index(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    let Some((&inner, outer_dims)) = target.split_last() else {
        out.push(0);
        return out;
    };
    if inner == 0 {
        return out;
    }
    let strides = broadcast_strides(shape, target);
    let step = strides[target.len() - 1];
    let mut idx = vec![0usize; outer_dims.len()];
    let mut offset = 0usize;
    for _ in 0..n / inner {
        out.extend((0..inner).map(|j| offset + j * step));
        for d in (0..outer_dims.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < outer_dims[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    kind: BinaryKind,
    out_shape: Vec<usize>,
}

impl BackwardOp for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        if a.shape() == b.shape() {
            return self.backward_same_shape(a, b, grad);
        }
        let ia = broadcast_index(a.shape(), &self.out_shape);
        let ib = broadcast_index(b.shape(), &self.out_shape);
        let (ad, bd) = (a.data(), b.data());
        let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
        for (k, &g) in grad.iter().enumerate() {
            let (x, y) = (ad[ia[k]], bd[ib[k]]);
            let (da, db) = match self.kind {
                BinaryKind::Add => (g, g),
                BinaryKind::Sub => (g, -g),
                BinaryKind::Mul => (g * y, g * x),
                BinaryKind::Div => (g / y, -g * x / (y * y)),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia[k]] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib[k]] += db;
            }
        }
        vec![ga, gb]
    }
}

impl BinaryOp {
    fn backward_same_shape(&self, a: &Tensor, b: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (ad, bd) = (a.data(), b.data());
        let ga = a.requires_grad().then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => grad.to_vec(),
            BinaryKind::Mul => grad.iter().zip(bd).map(|(g, y)| g * y).collect(),
            BinaryKind::Div => grad.iter().zip(bd).map(|(g, y)| g / y).collect(),
        });
        let gb = b.requires_grad().then(|| match self.kind {
            BinaryKind::Add => grad.to_vec(),
            BinaryKind::Sub => grad.iter().map(|g| -g).collect(),
            BinaryKind::Mul => grad.iter().zip(ad).map(|(g, x)| g * x).collect(),
            BinaryKind::Div => grad.iter().zip(ad.iter().zip(bd)).map(|(g, (x, y))| -g * x / (y * y)).collect(),
        });
        vec![ga, gb]
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor, TensorError> {
    let op = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    };
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
    })?;
    let f = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let ia = broadcast_index(a.shape(), &out_shape);
        let ib = broadcast_index(b.shape(), &out_shape);
        ia.iter().zip(&ib).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
    };
    Ok(Tensor::from_op(out_shape.clone(), data, vec![a.clone(), b.clone()], BinaryOp { kind, out_shape }))
}

/// Pointwise functions with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Expm1,
    Ln,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Relu,
    Silu,
    Softplus,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Expm1 => "expm1",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Expm1 => x.exp_m1(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Expm1 => y + 1.0,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

struct UnaryOp(Unary);

impl BackwardOp for UnaryOp {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let g = grad
            .iter()
            .zip(x)
            .zip(output)
            .map(|((&g, &x), &y)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

struct AffineOp {
    scale: f64,
}

impl BackwardOp for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, _inputs: &[Tensor], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.scale).collect())]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, BinaryKind::Div)
    }

    pub fn unary(&self, f: Unary) -> Tensor {
        let data = self.data().iter().map(|&x| f.eval(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], UnaryOp(f))
    }

    /// `scale * self + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.data().iter().map(|&x| scale * x + shift).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], AffineOp { scale })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.affine(1.0, c)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }
    pub fn expm1(&self) -> Tensor {
        self.unary(Unary::Expm1)
    }
    pub fn ln(&self) -> Tensor {
        self.unary(Unary::Ln)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(Unary::Sqrt)
    }
    pub fn square(&self) -> Tensor {
        self.unary(Unary::Square)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(Unary::Tanh)
    }
    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu)
    }
    pub fn silu(&self) -> Tensor {
        self.unary(Unary::Silu)
    }
    /// Swish with unit slope; identical to SiLU.
    pub fn swish(&self) -> Tensor {
        self.unary(Unary::Silu)
    }
    pub fn softplus(&self) -> Tensor {
        self.unary(Unary::Softplus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 5], &[3, 1]), Some(vec![2, 3, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn product_rule() {
        let a = Tensor::param(&[1], vec![2.0]).unwrap();
        let b = Tensor::param(&[1], vec![3.0]).unwrap();
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn add_distributes_gradient_unchanged() {
        let a = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::param(&[3], vec![0.0, 4.0, 1.0]).unwrap();
        let y = a.add(&b).unwrap();
        let seed = [0.25, -1.5, 3.0];
        y.backward_with(&seed).unwrap();
        assert_eq!(a.grad().unwrap(), seed.to_vec());
        assert_eq!(b.grad().unwrap(), seed.to_vec());
    }

    #[test]
    fn broadcast_backward_sums_over_expanded_axes() {
        let a = Tensor::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        a.add(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatch_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let msg = a.mul(&b).unwrap_err().to_string();
        assert!(msg.contains("mul") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        x.sigmoid().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
