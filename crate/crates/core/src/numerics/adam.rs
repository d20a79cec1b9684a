use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.rows(), t.cols());
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam slot {i}: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.first[i].shape()
            )));
        }
        g.ensure_finite("adam gradient")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        let pv = p.as_mut_slice();
        for k in 0..pv.len() {
            let gk = g.as_slice()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            pv[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.ensure_finite("adam update")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let g = Tensor::from_rows(&[[0.3, -7.0, 1e-3]]).unwrap();
        let mut st = AdamState::with_hyper(&[&p], 0.9, 0.999, 0.0);
        adam_step(&mut [&mut p], &[g], &mut st, 0.01).unwrap();
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.first_moment(0), &Tensor::zeros(1, 2));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = Tensor::from_rows(&[[1.0]]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::filled(1, 1, 1.0)], &mut st, 0.1).unwrap();
        let m1 = st.first_moment(0).get(0, 0);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 1)], &mut st, 0.1).unwrap();
        assert!((st.first_moment(0).get(0, 0) - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends() {
        // f(x) = x^2, gradient 2x.
        let mut x = Tensor::from_rows(&[[1.0]]).unwrap();
        let mut st = AdamState::new(&[&x]);
        let mut prev = x.get(0, 0);
        for _ in 0..2 {
            let g = x.scale(2.0).unwrap();
            adam_step(&mut [&mut x], &[g], &mut st, 0.1).unwrap();
            assert!(x.get(0, 0) < prev);
            prev = x.get(0, 0);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut st, 0.1);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert_eq!(st.step_count(), 0);
    }
}
