use rand::Rng;

use super::{glorot_uniform, ParamMut, ParamRef, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense 2-D cross-correlation over `[batch, in_c, h, w]` with zero padding.
///
/// Also serves as the reference implementation the sparse convolution is
/// checked against.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

struct Geometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k.is_multiple_of(2) || stride == 0 {
            return Err(Error::invalid(format!(
                "conv kernel must be odd and stride positive (k={k}, stride={stride})"
            )));
        }
        Ok(Conv2d {
            kernel: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
            grad_kernel: Tensor::zeros(&[out_c, in_c, k, k]),
            grad_bias: Tensor::zeros(&[out_c]),
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k2 = self.kernel_size() * self.kernel_size();
        let fan_in = self.in_channels() * k2;
        let fan_out = self.out_channels() * k2;
        glorot_uniform(&mut self.kernel, fan_in, fan_out, rng);
        self.bias.fill(T::zero());
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim(2)
    }

    /// Output spatial extent `floor((n + 2·padding − k) / stride) + 1`.
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        let k = self.kernel_size();
        (padded >= k).then(|| (padded - k) / self.stride + 1)
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        if x.ndim() != 4 || x.dim(1) != self.in_channels() {
            return Err(Error::shape(format!(
                "conv2d expects [batch, {}, h, w], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        let (oh, ow) = match (self.output_extent(h), self.output_extent(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "input {h}x{w} smaller than kernel {} with padding {}",
                    self.kernel_size(),
                    self.padding
                )))
            }
        };
        Ok(Geometry {
            batch: x.dim(0),
            in_c: self.in_channels(),
            h,
            w,
            out_c: self.out_channels(),
            k: self.kernel_size(),
            oh,
            ow,
        })
    }

    /// Input coordinate read by output `o` at tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let xd = x.data();
        let kd = self.kernel.data();
        let mut y = vec![T::zero(); g.batch * g.out_c * g.oh * g.ow];
        for b in 0..g.batch {
            for oc in 0..g.out_c {
                let bias = self.bias.data()[oc];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = bias;
                        for ic in 0..g.in_c {
                            let xbase = (b * g.in_c + ic) * g.h * g.w;
                            let kbase = (oc * g.in_c + ic) * g.k * g.k;
                            for ky in 0..g.k {
                                let Some(iy) = self.source(oy, ky, g.h) else { continue };
                                for kx in 0..g.k {
                                    let Some(ix) = self.source(ox, kx, g.w) else { continue };
                                    acc = acc + kd[kbase + ky * g.k + kx] * xd[xbase + iy * g.w + ix];
                                }
                            }
                        }
                        y[((b * g.out_c + oc) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[g.batch, g.out_c, g.oh, g.ow], y)
    }

    /// Accumulates kernel and bias gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        if grad_out.shape() != [g.batch, g.out_c, g.oh, g.ow] {
            return Err(Error::shape(format!(
                "conv2d grad_out expected {:?}, got {:?}",
                [g.batch, g.out_c, g.oh, g.ow],
                grad_out.shape()
            )));
        }
        let xd = x.data();
        let gd = grad_out.data();
        let mut gx = vec![T::zero(); xd.len()];
        let mut gk = std::mem::replace(&mut self.grad_kernel, Tensor::zeros(&[1]));
        let mut gb = std::mem::replace(&mut self.grad_bias, Tensor::zeros(&[1]));
        {
            let kd = self.kernel.data();
            let gkd = gk.data_mut();
            let gbd = gb.data_mut();
            for b in 0..g.batch {
                for oc in 0..g.out_c {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let go = gd[((b * g.out_c + oc) * g.oh + oy) * g.ow + ox];
                            gbd[oc] = gbd[oc] + go;
                            for ic in 0..g.in_c {
                                let xbase = (b * g.in_c + ic) * g.h * g.w;
                                let kbase = (oc * g.in_c + ic) * g.k * g.k;
                                for ky in 0..g.k {
                                    let Some(iy) = self.source(oy, ky, g.h) else { continue };
                                    for kx in 0..g.k {
                                        let Some(ix) = self.source(ox, kx, g.w) else { continue };
                                        let xi = xbase + iy * g.w + ix;
                                        let ki = kbase + ky * g.k + kx;
                                        gkd[ki] = gkd[ki] + go * xd[xi];
                                        gx[xi] = gx[xi] + go * kd[ki];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.grad_kernel = gk;
        self.grad_bias = gb;
        Tensor::from_vec(x.shape(), gx)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: "kernel".into(),
                value: &mut self.kernel,
                grad: &mut self.grad_kernel,
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
                name: "kernel".into(),
                value: &self.kernel,
                grad: &self.grad_kernel,
            },
            ParamRef {
                name: "bias".into(),
                value: &self.bias,
                grad: &self.grad_bias,
            },
        ]
    }
}
