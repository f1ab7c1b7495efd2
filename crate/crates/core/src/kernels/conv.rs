//! 2-D convolution, zero padding, square stride, via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output shape of `input * weight`; errors name the offending dimensions.
pub fn conv2d_shape(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Shape> {
    geometry(input, weight, stride, padding)
        .map(|g| Shape::new(input.n(), weight.n(), g.oh, g.ow))
}

pub(crate) fn geometry(
    input: Shape,
    weight: Shape,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [_, cin, h, w] = input.0;
    let [cout, wcin, kh, kw] = weight.0;
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels C={cin} (input {input}) != weight Cin={wcin} (weight {weight})"
            ),
        ));
    }
    if cout == 0 || kh == 0 || kw == 0 {
        return Err(Error::shape("conv2d", format!("degenerate weight {weight}")));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    Ok(ConvGeometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let out = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[n, o] = sum_c w[o, c] (*) x[n, c] (+ bias[o])`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().n();
    if let Some(b) = bias {
        if b.shape().numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias {} does not have Cout={cout} elements", b.shape()),
            ));
        }
    }
    let n = input.shape().n();
    let out_shape = Shape::new(n, cout, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = cout * cols;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for i in 0..n {
        let x = &input.data()[i * in_per..(i + 1) * in_per];
        let b_mat: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let y = &mut out.data_mut()[i * out_per..(i + 1) * out_per];
        T::gemm(
            cout,
            rows,
            cols,
            T::one(),
            weight.data(),
            (rows, 1),
            b_mat,
            (cols, 1),
            T::zero(),
            y,
            (cols, 1),
        );
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                y[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_bias: bool,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().n();
    let n = input.shape().n();
    let expected = Shape::new(n, cout, g.oh, g.ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {} vs output {expected}", grad_out.shape()),
        ));
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = cout * cols;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if need_input && !g.is_pointwise() { rows * cols } else { 0 }];

    for i in 0..n {
        let x = &input.data()[i * in_per..(i + 1) * in_per];
        let dy = &grad_out.data()[i * out_per..(i + 1) * out_per];
        let b_mat: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        // dW += dY (cout x cols) * col^T (cols x rows)
        T::gemm(
            cout,
            cols,
            rows,
            T::one(),
            dy,
            (cols, 1),
            b_mat,
            (1, cols),
            T::one(),
            dw.data_mut(),
            (rows, 1),
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_per..(i + 1) * in_per];
            if g.is_pointwise() {
                // dX = W^T (rows x cout) * dY
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    weight.data(),
                    (1, rows),
                    dy,
                    (cols, 1),
                    T::zero(),
                    dxi,
                    (cols, 1),
                );
            } else {
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    weight.data(),
                    (1, rows),
                    dy,
                    (cols, 1),
                    T::zero(),
                    &mut dcol,
                    (cols, 1),
                );
                col2im(&dcol, &g, dxi);
            }
        }
    }

    let db = need_bias.then(|| {
        let mut db = Tensor::zeros(Shape::channels(cout));
        for i in 0..n {
            for o in 0..cout {
                let s: T = grad_out.data()[i * out_per + o * cols..i * out_per + (o + 1) * cols]
                    .iter()
                    .copied()
                    .sum();
                db.data_mut()[o] += s;
            }
        }
        db
    });

    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
