//! Bias-corrected Adam.

use super::params::ParamStore;
use super::TensorError;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_store(store: &ParamStore, lr: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.tensor.numel()).collect();
        Self::new(&sizes, lr)
    }

    /// Applies one update to `params` in place. A missing gradient counts as zero.
    pub fn update(&mut self, names: &[&str], params: &mut [Vec<f64>], grads: &[Option<&[f64]>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[i].len() || params[i].len() != self.m[i].len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: vec![params[i].len()],
                        rhs: vec![g.len()],
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of {}", names.get(i).copied().unwrap_or("?"))));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// One optimizer step over every parameter in `store`, using the
    /// gradients accumulated by the last backward pass.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads = store.grads();
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut values: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.to_vec()).collect();
        self.update(&name_refs, &mut values, &grad_refs)?;
        for (i, v) in values.into_iter().enumerate() {
            store.set(super::params::ParamId(i), v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(g: f64, steps: usize) -> Vec<f64> {
        let mut st = AdamState::new(&[1], 0.001);
        let mut p = vec![vec![0.0]];
        let mut hist = vec![0.0];
        for _ in 0..steps {
            st.update(&["w"], &mut p, &[Some(&[g])]).unwrap();
            hist.push(p[0][0]);
        }
        hist
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let h = one_param(0.0, 3);
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let h = one_param(1.0, 1);
        // m_hat = 1, v_hat = 1: delta = -lr / (1 + eps)
        assert!((h[1] - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_updates_do_not_grow() {
        let h = one_param(1.0, 2);
        let u1 = (h[1] - h[0]).abs();
        let u2 = (h[2] - h[1]).abs();
        assert!(u2 <= u1 * (1.0 + 1e-12), "{u1} {u2}");
        // closed form for a constant gradient: lr * g / (|g| + eps)
        assert!((u2 - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut st = AdamState::new(&[1], 0.001);
        let mut p = vec![vec![0.0]];
        let err = st.update(&["layers.0.w"], &mut p, &[Some(&[f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("layers.0.w"));
        assert_eq!(st.step, 0);
    }
}
