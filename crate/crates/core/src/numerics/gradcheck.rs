//! Central finite-difference validation of analytic gradients.

use super::tensor::{no_grad, Tensor};
use super::TensorError;

/// Relative error as `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the gradient of the scalar function `f` at `x` against central
/// differences with step `h`, returning the maximum relative error over all
/// coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tensor) -> Result<Tensor, TensorError>,
{
    Ok(finite_difference_report(f, x, h)?.max_rel_err)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h²)`.
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h⁴)`.
    FivePoint,
}

pub fn finite_difference_report<F>(f: F, x: &Tensor, h: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&Tensor) -> Result<Tensor, TensorError>,
{
    finite_difference_report_with(f, x, h, Stencil::ThreePoint)
}

pub fn finite_difference_report_with<F>(f: F, x: &Tensor, h: f64, stencil: Stencil) -> Result<GradReport, TensorError>
where
    F: Fn(&Tensor) -> Result<Tensor, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument { op: "finite_difference_check", reason: format!("step {h} must be positive") });
    }
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarBackward(y.shape().to_vec()));
    }
    if !y.all_finite() {
        return Err(TensorError::NonFinite("function value".into()));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut numeric = Vec::with_capacity(x.numel());
    let base = x.to_vec();
    no_grad(|| -> Result<(), TensorError> {
        for i in 0..base.len() {
            let at = |offset: f64| -> Result<f64, TensorError> {
                let mut p = base.clone();
                p[i] += offset;
                let v = f(&Tensor::new(x.shape(), p)?)?.item();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TensorError::NonFinite(format!("function value near coordinate {i}")))
                }
            };
            numeric.push(match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
            });
        }
        Ok(())
    })?;
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("analytic gradient".into()));
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradReport { max_rel_err, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(|t| Ok(t.square().sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn five_point_beats_three_point() {
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let f = |t: &Tensor| Ok(t.exp().sum_all());
        let three = finite_difference_report_with(f, &x, 1e-3, Stencil::ThreePoint).unwrap().max_rel_err;
        let five = finite_difference_report_with(f, &x, 1e-3, Stencil::FivePoint).unwrap().max_rel_err;
        assert!(three > 1e-8 && five < 1e-10, "{three} {five}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_difference_report(|t| Ok(t.sigmoid().sum_all()), &x, 1e-5).unwrap();
        assert_eq!(r.analytic, vec![0.25]);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(finite_difference_check(|t| Ok(t.sum_all()), &x, 0.0).is_err());
        let x = Tensor::new(&[1], vec![-1.0]).unwrap();
        assert!(matches!(
            finite_difference_check(|t| Ok(t.ln().sum_all()), &x, 1e-5),
            Err(TensorError::NonFinite(_))
        ));
    }
}
