//! Permutation-invariant MIL pooling over a `[K, D]` bag of embeddings.
//!
//! Max is elementwise over the bag; its backward sends each dimension's
//! gradient to the lowest-index maximiser. Log-sum-exp and attention use
//! max-subtraction before exponentiating.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, ParamMut, ParamRef, Parameterized};
use crate::layers::{softmax_in_place, Activation};
use crate::tensor::{Scalar, Tensor};

fn check_bag<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::shape(format!("bag must be [K, D], got {:?}", x.shape())));
    }
    if x.dim(0) == 0 {
        return Err(Error::invalid("empty bag"));
    }
    Ok((x.dim(0), x.dim(1)))
}

fn check_grad<T: Scalar>(d: usize, grad: &[T]) -> Result<()> {
    if grad.len() != d {
        return Err(Error::shape(format!("pooled gradient has {} entries, expected {d}", grad.len())));
    }
    Ok(())
}

pub fn pool_mean<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (k, d) = check_bag(x)?;
    let mut out = vec![T::zero(); d];
    for i in 0..k {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o = *o + v;
        }
    }
    let n = T::lit(k as f64);
    out.iter_mut().for_each(|o| *o = *o / n);
    Ok(out)
}

pub fn pool_mean_backward<T: Scalar>(x: &Tensor<T>, grad: &[T]) -> Result<Tensor<T>> {
    let (k, d) = check_bag(x)?;
    check_grad(d, grad)?;
    let n = T::lit(k as f64);
    let row: Vec<T> = grad.iter().map(|&g| g / n).collect();
    Tensor::from_vec(&[k, d], row.iter().copied().cycle().take(k * d).collect())
}

/// Elementwise max together with the winning instance per dimension.
pub fn pool_max<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<usize>)> {
    let (k, d) = check_bag(x)?;
    let mut out = x.row(0).to_vec();
    let mut arg = vec![0usize; d];
    for i in 1..k {
        for (j, &v) in x.row(i).iter().enumerate() {
            if v > out[j] {
                out[j] = v;
                arg[j] = i;
            }
        }
    }
    Ok((out, arg))
}

pub fn pool_max_backward<T: Scalar>(x: &Tensor<T>, argmax: &[usize], grad: &[T]) -> Result<Tensor<T>> {
    let (k, d) = check_bag(x)?;
    check_grad(d, grad)?;
    let mut gx = Tensor::zeros(&[k, d]);
    for (j, (&i, &g)) in argmax.iter().zip(grad).enumerate() {
        gx.data_mut()[i * d + j] = g;
    }
    Ok(gx)
}

/// Log-sum-exp sharpness `M > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LseParam(f64);

impl LseParam {
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::invalid(format!("log-sum-exp M must be positive, got {m}")));
        }
        Ok(LseParam(m))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Per dimension `(1/M)·log Σ_k exp(M·x_k)`.
pub fn pool_lse<T: Scalar>(x: &Tensor<T>, param: LseParam) -> Result<Vec<T>> {
    let (k, d) = check_bag(x)?;
    let m = T::lit(param.get());
    let (mx, _) = pool_max(x)?;
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let s: T = (0..k).map(|i| (m * (x.row(i)[j] - mx[j])).exp()).sum();
        out.push(mx[j] + s.ln() / m);
    }
    Ok(out)
}

/// Each instance receives `g · softmax_k(M·x_k)` per dimension.
pub fn pool_lse_backward<T: Scalar>(x: &Tensor<T>, param: LseParam, grad: &[T]) -> Result<Tensor<T>> {
    let (k, d) = check_bag(x)?;
    check_grad(d, grad)?;
    let m = T::lit(param.get());
    let (mx, _) = pool_max(x)?;
    let mut gx = Tensor::zeros(&[k, d]);
    for j in 0..d {
        let e: Vec<T> = (0..k).map(|i| (m * (x.row(i)[j] - mx[j])).exp()).collect();
        let s: T = e.iter().copied().sum();
        for (i, ei) in e.into_iter().enumerate() {
            gx.data_mut()[i * d + j] = grad[j] * ei / s;
        }
    }
    Ok(gx)
}

/// Attention (optionally gated) pooling parameters.
#[derive(Debug, Clone)]
pub struct AttentionPool<T> {
    /// `[L, D]`
    pub v: Tensor<T>,
    /// `[L, D]`, used only when gated
    pub u: Tensor<T>,
    /// `[L]`
    pub w: Tensor<T>,
    pub gated: bool,
    pub grad_v: Tensor<T>,
    pub grad_u: Tensor<T>,
    pub grad_w: Tensor<T>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    tanh_v: Vec<T>,
    sig_u: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> AttentionPool<T> {
    pub fn new(dim: usize, hidden: usize, gated: bool) -> Self {
        AttentionPool {
            v: Tensor::zeros(&[hidden, dim]),
            u: Tensor::zeros(&[hidden, dim]),
            w: Tensor::zeros(&[hidden]),
            gated,
            grad_v: Tensor::zeros(&[hidden, dim]),
            grad_u: Tensor::zeros(&[hidden, dim]),
            grad_w: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (l, d) = (self.hidden(), self.dim());
        glorot_uniform(&mut self.v, d, l, rng);
        if self.gated {
            glorot_uniform(&mut self.u, d, l, rng);
        }
        glorot_uniform(&mut self.w, l, 1, rng);
    }

    pub fn hidden(&self) -> usize {
        self.v.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.v.dim(1)
    }

    fn project(m: &Tensor<T>, x: &[T], act: Activation) -> Vec<T> {
        let d = x.len();
        m.data()
            .chunks(d)
            .map(|row| act.apply(row.iter().zip(x).fold(T::zero(), |s, (&a, &b)| s + a * b)))
            .collect()
    }

    /// Returns the pooled embedding and the cache holding the weights.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Vec<T>, AttentionCache<T>)> {
        let (k, d) = check_bag(x)?;
        if d != self.dim() {
            return Err(Error::shape(format!("attention expects D={}, bag has D={d}", self.dim())));
        }
        let l = self.hidden();
        let mut tanh_v = Vec::with_capacity(k * l);
        let mut sig_u = Vec::new();
        let mut logits = Vec::with_capacity(k);
        for i in 0..k {
            let a = Self::project(&self.v, x.row(i), Activation::Tanh);
            let logit = if self.gated {
                let g = Self::project(&self.u, x.row(i), Activation::Sigmoid);
                let s = a.iter().zip(&g).zip(self.w.data()).fold(T::zero(), |s, ((&a, &g), &w)| s + w * a * g);
                sig_u.extend(g);
                s
            } else {
                a.iter().zip(self.w.data()).fold(T::zero(), |s, (&a, &w)| s + w * a)
            };
            tanh_v.extend(a);
            logits.push(logit);
        }
        softmax_in_place(&mut logits);
        let weights = logits;
        let mut out = vec![T::zero(); d];
        for (i, &a) in weights.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + a * v;
            }
        }
        Ok((out, AttentionCache { tanh_v, sig_u, weights }))
    }

    /// Accumulates `V`, `U`, `w` gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Tensor<T>, cache: &AttentionCache<T>, grad: &[T]) -> Result<Tensor<T>> {
        let (k, d) = check_bag(x)?;
        check_grad(d, grad)?;
        if cache.weights.len() != k {
            return Err(Error::StaleCache("attention cache was built for a different bag".into()));
        }
        let l = self.hidden();
        let alpha = &cache.weights;
        // ∂L/∂α_k = ⟨g, x_k⟩, then through the softmax
        let dalpha: Vec<T> = (0..k)
            .map(|i| x.row(i).iter().zip(grad).fold(T::zero(), |s, (&a, &b)| s + a * b))
            .collect();
        let mean = alpha.iter().zip(&dalpha).fold(T::zero(), |s, (&a, &b)| s + a * b);
        let dlogit: Vec<T> = alpha.iter().zip(&dalpha).map(|(&a, &b)| a * (b - mean)).collect();

        let mut gx = Tensor::zeros(&[k, d]);
        for i in 0..k {
            let xi = x.row(i);
            let a = &cache.tanh_v[i * l..(i + 1) * l];
            let g = if self.gated { Some(&cache.sig_u[i * l..(i + 1) * l]) } else { None };
            {
                let row = gx.row_mut(i);
                for (r, &gv) in row.iter_mut().zip(grad) {
                    *r = alpha[i] * gv;
                }
            }
            for h in 0..l {
                let wh = self.w.data()[h];
                let gate = g.map_or(T::one(), |g| g[h]);
                let gw = &mut self.grad_w.data_mut()[h];
                *gw = *gw + dlogit[i] * a[h] * gate;
                let dh = dlogit[i] * wh;
                let dpre_v = dh * gate * (T::one() - a[h] * a[h]);
                let dpre_u = g.map(|g| dh * a[h] * g[h] * (T::one() - g[h]));
                let vrow = h * d;
                for j in 0..d {
                    let gvr = &mut self.grad_v.data_mut()[vrow + j];
                    *gvr = *gvr + dpre_v * xi[j];
                    let mut acc = dpre_v * self.v.data()[vrow + j];
                    if let Some(du) = dpre_u {
                        let gur = &mut self.grad_u.data_mut()[vrow + j];
                        *gur = *gur + du * xi[j];
                        acc = acc + du * self.u.data()[vrow + j];
                    }
                    let cell = &mut gx.data_mut()[i * d + j];
                    *cell = *cell + acc;
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Scalar> Parameterized<T> for AttentionPool<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = vec![ParamMut {
            name: "v".into(),
            value: &mut self.v,
            grad: &mut self.grad_v,
        }];
        if self.gated {
            v.push(ParamMut {
                name: "u".into(),
                value: &mut self.u,
                grad: &mut self.grad_u,
            });
        }
        v.push(ParamMut {
            name: "w".into(),
            value: &mut self.w,
            grad: &mut self.grad_w,
        });
        v
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = vec![ParamRef {
            name: "v".into(),
            value: &self.v,
            grad: &self.grad_v,
        }];
        if self.gated {
            v.push(ParamRef {
                name: "u".into(),
                value: &self.u,
                grad: &self.grad_u,
            });
        }
        v.push(ParamRef {
            name: "w".into(),
            value: &self.w,
            grad: &self.grad_w,
        });
        v
    }
}

/// Aggregation applied to per-instance class probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InstanceKind {
    Mean,
    Max,
    Lse(LseParam),
}

/// Pools each class column of `[K, C]` scores across instances, then
/// renormalises to a distribution.
pub fn pool_instance_level<T: Scalar>(scores: &Tensor<T>, kind: InstanceKind) -> Result<Vec<T>> {
    let raw = instance_aggregate(scores, kind)?;
    let s: T = raw.iter().copied().sum();
    Ok(raw.iter().map(|&v| v / s).collect())
}

fn instance_aggregate<T: Scalar>(scores: &Tensor<T>, kind: InstanceKind) -> Result<Vec<T>> {
    match kind {
        InstanceKind::Mean => pool_mean(scores),
        InstanceKind::Max => Ok(pool_max(scores)?.0),
        InstanceKind::Lse(m) => pool_lse(scores, m),
    }
}

pub fn pool_instance_level_backward<T: Scalar>(scores: &Tensor<T>, kind: InstanceKind, grad: &[T]) -> Result<Tensor<T>> {
    let raw = instance_aggregate(scores, kind)?;
    check_grad(raw.len(), grad)?;
    let s: T = raw.iter().copied().sum();
    // out_c = p_c / S  ⇒  ∂L/∂p_c = (g_c − Σ g·out) / S
    let dot = raw.iter().zip(grad).fold(T::zero(), |acc, (&p, &g)| acc + g * p / s);
    let dp: Vec<T> = grad.iter().map(|&g| (g - dot) / s).collect();
    match kind {
        InstanceKind::Mean => pool_mean_backward(scores, &dp),
        InstanceKind::Max => {
            let (_, arg) = pool_max(scores)?;
            pool_max_backward(scores, &arg, &dp)
        }
        InstanceKind::Lse(m) => pool_lse_backward(scores, m, &dp),
    }
}
