use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn pool_shape(
    op: &'static str,
    x: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(op, "kernel and stride must be >= 1"));
    }
    if padding >= kernel && padding > 0 {
        return Err(Error::invalid(op, "padding must be smaller than the kernel"));
    }
    let (h, w) = (x.h() + 2 * padding, x.w() + 2 * padding);
    if h < kernel || w < kernel {
        return Err(Error::shape(
            op,
            format!("window {kernel}x{kernel} larger than input {x}"),
        ));
    }
    Ok(Shape::new(
        x.n(),
        x.c(),
        (h - kernel) / stride + 1,
        (w - kernel) / stride + 1,
    ))
}

/// Average pooling without padding.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let out_shape = pool_shape("avgpool2d", x.shape(), kernel, stride, 0)?;
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let inv = T::one() / T::from_f64((kernel * kernel) as f64);
    let mut out = Tensor::zeros(out_shape);
    let (xd, od) = (x.data(), out.data_mut());
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * w..];
                    for kx in 0..kernel {
                        acc += row[ox * stride + kx];
                    }
                }
                od[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Tensor<T> {
    let [n, c, h, w] = input_shape.0;
    let (oh, ow) = (grad_out.shape().h(), grad_out.shape().w());
    let inv = T::one() / T::from_f64((kernel * kernel) as f64);
    let mut dx = Tensor::zeros(input_shape);
    let (gd, dd) = (grad_out.data(), dx.data_mut());
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(p * oh + oy) * ow + ox] * inv;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        dd[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling with implicit `-inf` padding. Returns the flat argmax index
/// (into the input) of every output element.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let out_shape = pool_shape("maxpool2d", x.shape(), kernel, stride, padding)?;
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out_shape.numel()];
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = p * h * w + iy as usize * w + ix as usize;
                        let v = xd[idx];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                // padding < kernel guarantees at least one in-bounds tap
                let (v, idx) = best.expect("window without in-bounds taps");
                out.data_mut()[o] = v;
                arg[o] = idx;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    argmax: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(n, c, 1, 1), data).expect("shape by construction")
}

pub fn global_avgpool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape.h() * input_shape.w();
    let inv = T::one() / T::from_f64(hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avgpool_on_ramp() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |[_, _, h, w]| (h * 4 + w) as f64);
        let y = avgpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn global_avgpool_of_constant() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 5, 7), |[_, c, _, _]| c as f64 + 0.5);
        let y = global_avgpool(&x);
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        for n in 0..2 {
            for c in 0..3 {
                assert!((y.at([n, c, 0, 0]) - (c as f64 + 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn maxpool_with_padding_picks_window_max() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |[_, _, h, w]| {
            -((h as f64 - 1.0).powi(2) + (w as f64 - 2.0).powi(2))
        });
        let (y, arg) = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        // the peak (1, 2) is inside windows (0,1) and (1,1)... every window
        // containing it returns 0.
        assert_eq!(y.at([0, 0, 0, 1]), 0.0);
        assert_eq!(arg[1], 4 + 2);
        assert!(maxpool2d(&x, 3, 2, 3).is_err());
    }
}
