use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Bias-corrected Adam with moments laid out in parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Parameterized<T>>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<Vec<usize>> = params.params().iter().map(|p| p.value.shape().to_vec()).collect();
        AdamState {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update using the gradients currently stored in `params`.
    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P) -> Result<()> {
        let mut ps = params.params_mut();
        if ps.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                ps.len()
            )));
        }
        for (p, m) in ps.iter().zip(&self.m) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, moments {:?}",
                    p.name,
                    p.value.shape(),
                    m.shape()
                )));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for ((p, m), v) in ps.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + wd * *w;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;

    fn scalar_model(w: f64, g: f64) -> Linear<f64> {
        let mut l = Linear::from_params(
            Tensor::from_f64(&[1, 1], &[w]).unwrap(),
            Tensor::from_f64(&[1], &[0.0]).unwrap(),
        )
        .unwrap();
        l.grad_weight.data_mut()[0] = g;
        l
    }

    #[test]
    fn first_step_hand_value() {
        let mut l = scalar_model(1.0, 0.5);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut a = AdamState::new(cfg, &l);
        a.step(&mut l).unwrap();
        assert_eq!(a.t, 1);
        let expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((l.weight.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn first_step_size_is_lr_for_any_gradient() {
        for g in [1e-3, 0.5, 42.0, -7.0] {
            let mut l = scalar_model(0.0, g);
            let cfg = AdamConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            let mut a = AdamState::new(cfg, &l);
            a.step(&mut l).unwrap();
            let moved = l.weight.data()[0].abs();
            assert!((moved - 0.01).abs() < 1e-6 * 0.01 / g.abs().min(1.0), "g={g}: {moved}");
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut l = scalar_model(0.3, 0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut a = AdamState::new(cfg, &l);
        for _ in 0..5 {
            a.step(&mut l).unwrap();
        }
        assert_eq!(l.weight.data()[0], 0.3);
    }

    #[test]
    fn decay_pulls_toward_zero() {
        let mut l = scalar_model(2.0, 0.0);
        let mut a = AdamState::new(AdamConfig::default(), &l);
        a.step(&mut l).unwrap();
        assert!(l.weight.data()[0] < 2.0);
    }
}
