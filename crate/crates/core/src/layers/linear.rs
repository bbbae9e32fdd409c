use rand::Rng;

use super::{glorot_uniform, ParamMut, ParamRef, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer `y = x Wᵀ + b` over a `[batch, in]` input.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Zero-initialised layer; call [`Linear::init`] for random weights.
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
            grad_weight: Tensor::zeros(&[out_features, in_features]),
            grad_bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::shape(format!(
                "linear weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear {
            grad_weight: Tensor::zeros(weight.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (out, inp) = (self.out_features(), self.in_features());
        glorot_uniform(&mut self.weight, inp, out, rng);
        self.bias.fill(T::zero());
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.ndim() != 2 || x.dim(1) != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects [batch, {}], got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        Ok(x.dim(0))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let (out, inp) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        let mut y = Vec::with_capacity(batch * out);
        for b in 0..batch {
            let xr = x.row(b);
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                let acc = wr.iter().zip(xr).fold(self.bias.data()[o], |s, (&a, &b)| s + a * b);
                y.push(acc);
            }
        }
        Tensor::from_vec(&[batch, out], y)
    }

    /// Accumulates weight and bias gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let (out, inp) = (self.out_features(), self.in_features());
        if grad_out.shape() != [batch, out] {
            return Err(Error::shape(format!(
                "linear grad_out expected [{batch}, {out}], got {:?}",
                grad_out.shape()
            )));
        }
        let mut gx = vec![T::zero(); batch * inp];
        {
            let gw = self.grad_weight.data_mut();
            let gb = self.grad_bias.data_mut();
            let w = self.weight.data();
            for b in 0..batch {
                let xr = x.row(b);
                let gr = grad_out.row(b);
                let gxr = &mut gx[b * inp..(b + 1) * inp];
                for o in 0..out {
                    let g = gr[o];
                    gb[o] = gb[o] + g;
                    let gwr = &mut gw[o * inp..(o + 1) * inp];
                    let wr = &w[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        gwr[i] = gwr[i] + g * xr[i];
                        gxr[i] = gxr[i] + g * wr[i];
                    }
                }
            }
        }
        Tensor::from_vec(&[batch, inp], gx)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: "weight".into(),
                value: &mut self.weight,
                grad: &mut self.grad_weight,
            },
            ParamMut {
                name: "bias".into(),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
            },
        ]
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: "weight".into(),
                value: &self.weight,
                grad: &self.grad_weight,
            },
            ParamRef {
                name: "bias".into(),
                value: &self.bias,
                grad: &self.grad_bias,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::prng;

    fn layer(w: &[f64], out: usize, inp: usize, b: &[f64]) -> Linear<f64> {
        Linear::from_params(
            Tensor::from_f64(&[out, inp], w).unwrap(),
            Tensor::from_f64(&[out], b).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_forward() {
        let l = layer(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0.0, 0.0]);
        let x = Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn sum_plus_bias() {
        let l = layer(&[1.0, 1.0], 1, 2, &[1.0]);
        let x = Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = prng(11);
        let mut l = Linear::<f64>::new(3, 4);
        l.init(&mut rng);
        l.bias = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let y = l.forward(&x).unwrap();
        for b in 0..2 {
            for o in 0..4 {
                let mut s = l.bias.data()[o];
                for i in 0..3 {
                    s += l.weight.data()[o * 3 + i] * x.data()[b * 3 + i];
                }
                assert!((y.data()[b * 4 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_identity_and_outer_product() {
        let mut l = layer(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0.0, 0.0]);
        let x = Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap();
        let g = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        assert_eq!(l.backward(&x, &g).unwrap().data(), &[1.0, 0.0]);

        let mut l = layer(&[0.0, 0.0], 1, 2, &[0.0]);
        let x = Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap();
        let g = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        l.backward(&x, &g).unwrap();
        assert_eq!(l.grad_weight.data(), &[2.0, 3.0]);
        assert_eq!(l.grad_bias.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let l = Linear::<f32>::new(3, 2);
        let x = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(l.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn init_bounds_and_determinism() {
        let mut a = Linear::<f32>::new(3, 3);
        let mut b = Linear::<f32>::new(3, 3);
        a.init(&mut prng(5));
        b.init(&mut prng(5));
        assert_eq!(a.weight, b.weight);
        assert!(a.weight.data().iter().all(|w| w.abs() <= 1.0));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(super::super::glorot_bound(3, 3), 1.0);
    }
}
