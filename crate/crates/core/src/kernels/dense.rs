//! Fully connected layer, elementwise activations, channel concat and the
//! softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `x (N, in, 1, 1)` (or any `(N, C, H, W)` with `C*H*W == in`),
/// `weight (out, in, 1, 1)`, `bias (1, out, 1, 1)` -> `(N, out, 1, 1)`.
pub fn linear_shape(x: Shape, weight: Shape, bias: Option<Shape>) -> Result<Shape> {
    let features = x.c() * x.h() * x.w();
    let [out, inp, kh, kw] = weight.0;
    if kh != 1 || kw != 1 || inp != features {
        return Err(Error::shape(
            "linear",
            format!("input {x} has {features} features but weight is {weight}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != out {
            return Err(Error::shape(
                "linear",
                format!("bias {b} does not have {out} elements"),
            ));
        }
    }
    Ok(Shape::new(x.n(), out, 1, 1))
}

pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let shape = linear_shape(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let (n, out) = (shape.n(), shape.c());
    let inp = weight.shape().c();
    let mut y = Tensor::zeros(shape);
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    // Y (n x out) = X (n x in) * W^T (in x out) + Y
    T::gemm(
        n,
        inp,
        out,
        T::one(),
        x.data(),
        (inp, 1),
        weight.data(),
        (1, inp),
        T::one(),
        y.data_mut(),
        (out, 1),
    );
    Ok(y)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> LinearGrads<T> {
    let n = x.shape().n();
    let [out, inp, _, _] = weight.shape().0;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    // dX (n x in) = dY (n x out) * W (out x in)
    T::gemm(
        n,
        out,
        inp,
        T::one(),
        grad_out.data(),
        (out, 1),
        weight.data(),
        (inp, 1),
        T::zero(),
        dx.data_mut(),
        (inp, 1),
    );
    // dW (out x in) = dY^T (out x n) * X (n x in)
    T::gemm(
        out,
        n,
        inp,
        T::one(),
        grad_out.data(),
        (1, out),
        x.data(),
        (inp, 1),
        T::zero(),
        dw.data_mut(),
        (inp, 1),
    );
    let mut db = Tensor::zeros(Shape::channels(out));
    for row in grad_out.data().chunks(out) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Uses the forward output `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&t, &g)| g * (T::one() - t * t))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn concat_shape(shapes: &[Shape]) -> Result<Shape> {
    let first = *shapes
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let mut c = 0;
    for s in shapes {
        if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
            return Err(Error::shape(
                "concat_channels",
                format!("N,H,W must match: {s} vs {first}"),
            ));
        }
        c += s.c();
    }
    Ok(Shape::new(first.n(), c, first.h(), first.w()))
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = concat_shape(&shapes)?;
    let hw = out_shape.h() * out_shape.w();
    let mut data = Vec::with_capacity(out_shape.numel());
    for i in 0..out_shape.n() {
        for t in inputs {
            let per = t.shape().c() * hw;
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Split the channel gradient of a concat back onto its inputs.
pub fn concat_backward<T: Scalar>(shapes: &[Shape], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let hw = grad_out.shape().h() * grad_out.shape().w();
    let per_out = grad_out.shape().c() * hw;
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let per = s.c() * hw;
            let mut data = Vec::with_capacity(s.numel());
            for i in 0..s.n() {
                let base = i * per_out + offset;
                data.extend_from_slice(&grad_out.data()[base..base + per]);
            }
            offset += per;
            Tensor::from_vec(*s, data).expect("shape by construction")
        })
        .collect()
}

/// Mean cross-entropy of `softmax(logits)` against integer labels. Returns
/// the scalar loss and the softmax probabilities.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = logits.shape();
    let classes = s.c() * s.h() * s.w();
    let n = s.n();
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    let mut probs = Tensor::zeros(s);
    let mut loss = 0.0f64;
    for (i, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let p = &mut probs.data_mut()[i * classes..(i + 1) * classes];
        let mut z = T::zero();
        for (pj, &v) in p.iter_mut().zip(row) {
            *pj = (v - max).exp();
            z += *pj;
        }
        p.iter_mut().for_each(|v| *v /= z);
        loss += (z.ln() - (row[label] - max)).to_f64();
    }
    let loss = Tensor::from_vec(Shape::scalar(), vec![T::from_f64(loss / n as f64)])?;
    Ok((loss, probs))
}

pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let s = probs.shape();
    let classes = s.c() * s.h() * s.w();
    let scale = grad / T::from_f64(s.n() as f64);
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(classes).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::full(Shape::new(3, 10, 1, 1), 0.7);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss.data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 10, 1, 1));
        assert!(matches!(
            softmax_xent(&logits, &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = Tensor::<f64>::from_fn(Shape::new(2, 1, 2, 2), |[n, _, h, w]| (n * 4 + h * 2 + w) as f64);
        let b = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |[n, c, h, w]| -((n * 12 + c * 4 + h * 2 + w) as f64));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 4, 2, 2));
        assert_eq!(cat.at([1, 0, 1, 1]), a.at([1, 0, 1, 1]));
        assert_eq!(cat.at([1, 3, 0, 1]), b.at([1, 2, 0, 1]));
        let parts = concat_backward(&[a.shape(), b.shape()], &cat);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros(Shape::new(2, 1, 3, 2))]).is_err());
    }

    #[test]
    fn linear_with_zero_weight_returns_bias() {
        let x = Tensor::<f64>::full(Shape::new(2, 5, 1, 1), 3.0);
        let w = Tensor::zeros(Shape::new(3, 5, 1, 1));
        let b = Tensor::from_vec(Shape::channels(3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
