//! Adam with bias correction, and the per-epoch exponential learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Param;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INITIAL_LR: f64 = 0.001;
pub const LR_GAMMA: f64 = 0.95;

/// `lr(epoch) = initial * gamma^epoch` when enabled, `initial` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub gamma: f64,
    pub enabled: bool,
}

impl LrSchedule {
    pub fn new(enabled: bool) -> Self {
        LrSchedule { initial: INITIAL_LR, gamma: LR_GAMMA, enabled }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.enabled {
            self.initial * libm::pow(self.gamma, epoch as f64)
        } else {
            self.initial
        }
    }
}

/// First/second moment estimates, one pair per parameter in collection order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let (m, v) =
            params.into_iter().map(|p| (Tensor::zeros(p.value().shape()), Tensor::zeros(p.value().shape()))).unzip();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One bias-corrected Adam update at learning rate `lr`, then clears the
    /// gradients. Parameters without a gradient are treated as having a zero
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters but {} were supplied",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value().shape() != m.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{} has shape {} but its moments have {}", p.name(), p.value().shape(), m.shape()),
                ));
            }
            if let Some(g) = p.grad() {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        let c1 = T::from_f64(1.0 - libm::pow(self.beta1, t as f64));
        let c2 = T::from_f64(1.0 - libm::pow(self.beta2, t as f64));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(|g| g.data().to_vec());
            let values = p.value_mut().data_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamId;
    use crate::tensor::Shape;

    fn scalar_param(v: f64) -> Param<f64> {
        Param::new(ParamId(0), "w", Tensor::scalar(v))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        let mut adam = AdamState::new([&p]);
        p.accumulate_grad(&[1.0]);
        adam.step(&mut [&mut p], 0.001).unwrap();
        // m_hat = 1, v_hat = 1 -> update = lr / (1 + 1e-8)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.value().item() - expected).abs() < 1e-18);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Param::new(ParamId(0), "w", Tensor::from_fn(Shape::new(1, 1, 2, 2), |i| i as f64));
        let before = p.value().clone();
        let mut adam = AdamState::new([&p]);
        p.accumulate_grad(&[0.0; 4]);
        adam.step(&mut [&mut p], 0.001).unwrap();
        adam.step(&mut [&mut p], 0.001).unwrap();
        assert!(p.value().bit_eq(&before));
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_param(1.0);
        let mut adam = AdamState::new([&p]);
        p.accumulate_grad(&[f64::NAN]);
        let err = adam.step(&mut [&mut p], 0.001).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(msg) if msg.contains('w')));
        assert_eq!(adam.step, 0);
        assert_eq!(p.value().item(), 1.0);
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::new(true);
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(2), 0.000_902_5);
        // 0.001 * 0.95**99 with a correctly rounded pow
        assert_eq!(s.lr_at(99), 6.232_136_021_404_208_5e-6);
        let off = LrSchedule::new(false);
        assert!((0..100).all(|e| off.lr_at(e) == 0.001));
    }
}
