use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index selected for each output element.
    pub argmax: Vec<usize>,
}

/// Non-overlapping `window × window` max pooling over `[batch, c, h, w]`.
/// Ties keep the first cell in row-major scan order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<MaxPoolOutput<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("maxpool2d expects rank 4, got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "spatial extent {h}x{w} not divisible by pooling window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * window + dy) * w + ox * window + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_vec(&[b, c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2d grad_out does not match forward output"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + g;
    }
    Ok(gx)
}

/// Mean over the spatial axes: `[batch, c, h, w] → [batch, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("global_avg_pool expects rank 4, got {:?}", x.shape())));
    }
    let (b, c, area) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let n = T::lit(area as f64);
    let data = x.data().chunks(area).map(|p| p.iter().copied().sum::<T>() / n).collect();
    Tensor::from_vec(&[b, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::shape("global_avg_pool grad_out does not match input"));
    }
    let area = input_shape[2] * input_shape[3];
    let n = T::lit(area as f64);
    let mut data = Vec::with_capacity(grad_out.len() * area);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / n, area));
    }
    Tensor::from_vec(input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        let g: Tensor<f64> = maxpool2d_backward(x.shape(), &p.argmax, &Tensor::from_f64(&[1, 1, 1, 1], &[1.5]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn maxpool_rejects_non_divisible() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2d(&x, 2).is_err());
    }

    #[test]
    fn global_average_of_constant() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 5], 2.5);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}
