//! Adam with bias correction.

use alloc::vec::Vec;

use crate::error::{contract, numeric, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&Tensor], lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. On a non-finite gradient nothing is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(&[self.m.len()], &[params.len(), grads.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(shape_err(m.shape(), p.shape()));
            }
            if g.shape() != m.shape() {
                return Err(shape_err(m.shape(), g.shape()));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(numeric("non-finite gradient"));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (libm::sqrtf(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(&[1.5, -2.0]);
        let mut st = AdamState::new(&[&p], 1e-3);
        st.step(&mut [&mut p], &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn one_step_is_about_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p], 0.001);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = v̂ = 1 after bias correction, so the step is lr/(1+eps).
        assert!((p.data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn positive_constant_gradient_decreases_monotonically() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p], 0.01);
        let mut prev = p.data()[0];
        for _ in 0..200 {
            st.step(&mut [&mut p], &[Tensor::scalar(0.7)]).unwrap();
            assert!(p.data()[0] < prev);
            prev = p.data()[0];
        }
    }

    #[test]
    fn nan_gradient_is_rejected_untouched() {
        let mut p = Tensor::row(&[1.0, 2.0]);
        let mut st = AdamState::new(&[&p], 1e-3);
        let before = st.clone();
        let err = st.step(&mut [&mut p], &[Tensor::row(&[0.1, f32::NAN])]);
        assert!(matches!(err, Err(crate::Error::Numeric(_))));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st, before);
    }
}
