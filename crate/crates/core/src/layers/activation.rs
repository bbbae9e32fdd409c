use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative evaluated at the pre-activation input `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    pub fn backward<T: Scalar>(self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        x.check_same_shape(grad_out)?;
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// Softmax along the last axis, with max-subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Input gradient of softmax given its output `y`: `y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same_shape(grad_y)?;
    let c = *y.shape().last().expect("checked by shape equality");
    let mut gx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(c).zip(grad_y.data().chunks(c)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_vec(y.shape(), gx)
}
