//! Dense differentiable layers used by the patch embedder and classifier
//! heads. Every layer exposes `forward` and an analytic `backward` that
//! accumulates parameter gradients and returns the input gradient.

mod activation;
mod conv;
mod linear;
mod pool;

pub use activation::{softmax, softmax_backward, Activation};
pub(crate) use activation::softmax_in_place;
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, MaxPoolOutput};

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Mutable view of one named parameter and its gradient buffer.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

/// Read-only view of one named parameter and its gradient buffer.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub value: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// Anything holding trainable tensors. Visit order is stable and defines the
/// layout used by the optimizer and by checkpoints.
pub trait Parameterized<T: Scalar> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;

    fn params(&self) -> Vec<ParamRef<'_, T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, params: Vec<ParamMut<'a, T>>) -> Vec<ParamMut<'a, T>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

pub(crate) fn prefixed_ref<'a, T>(prefix: &str, params: Vec<ParamRef<'a, T>>) -> Vec<ParamRef<'a, T>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fills `t` with uniform draws in `±glorot_bound(fan_in, fan_out)`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(t: &mut Tensor<T>, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = glorot_bound(fan_in, fan_out);
    for v in t.data_mut() {
        let u: f64 = rng.random();
        *v = T::lit((2.0 * u - 1.0) * bound);
    }
}
