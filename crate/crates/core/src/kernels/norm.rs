//! Per-channel batch normalisation over `(N, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved for the train-mode backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn check(x: Shape, gamma: Shape, beta: Shape) -> Result<()> {
    if gamma.numel() != x.c() || beta.numel() != x.c() {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "input has C={} but gamma {gamma} / beta {beta}",
                x.c()
            ),
        ));
    }
    Ok(())
}

pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    check(s, gamma.shape(), beta.shape())?;
    let [n, c, h, w] = s.0;
    if n < 2 {
        return Err(Error::BatchTooSmall { batch: n, shape: s });
    }
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let eps = T::from_f64(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut acc = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            acc += xd[base..base + hw].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for &v in &xd[base..base + hw] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
                for j in base..base + hw {
                    let v = (xd[j] - mu) * is;
                    xh[j] = v;
                    yd[j] = g * v + b;
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Running-stat update, PyTorch convention: unbiased variance feeds the
/// running estimate.
pub fn update_running<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    cache: &BnCache<T>,
    count: usize,
    momentum: f64,
) {
    let mo = T::from_f64(momentum);
    let keep = T::one() - mo;
    let corr = T::from_f64(count as f64 / (count.max(2) - 1) as f64);
    for ((rm, rv), (&m, &v)) in running_mean
        .data_mut()
        .iter_mut()
        .zip(running_var.data_mut().iter_mut())
        .zip(cache.mean.iter().zip(&cache.var))
    {
        *rm = keep * *rm + mo * m;
        *rv = keep * *rv + mo * v * corr;
    }
}

pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    check(s, gamma.shape(), beta.shape())?;
    let [n, c, h, w] = s.0;
    let hw = h * w;
    let eps = T::from_f64(eps);
    let mut y = Tensor::zeros(s);
    let (xd, yd) = (x.data(), y.data_mut());
    for ch in 0..c {
        let is = T::one() / (running_var.data()[ch] + eps).sqrt();
        let scale = gamma.data()[ch] * is;
        let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                yd[j] = xd[j] * scale + shift;
            }
        }
    }
    Ok(y)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> BnGrads<T> {
    let s = grad_out.shape();
    let [n, c, h, w] = s.0;
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let (dy, xh) = (grad_out.data(), cache.xhat.data());
    let mut dgamma = Tensor::zeros(Shape::channels(c));
    let mut dbeta = Tensor::zeros(Shape::channels(c));
    let mut dx = Tensor::zeros(s);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_dy += dy[j];
                sum_dy_xh += dy[j] * xh[j];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xh;
        dbeta.data_mut()[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        let dxd = dx.data_mut();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dxd[j] = k * (m * dy[j] - sum_dy - xh[j] * sum_dy_xh);
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn batchnorm2d_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> BnGrads<T> {
    let s = grad_out.shape();
    let [n, c, h, w] = s.0;
    let hw = h * w;
    let eps = T::from_f64(eps);
    let mut dgamma = Tensor::zeros(Shape::channels(c));
    let mut dbeta = Tensor::zeros(Shape::channels(c));
    let mut dx = Tensor::zeros(s);
    let (dy, xd) = (grad_out.data(), x.data());
    for ch in 0..c {
        let is = T::one() / (running_var.data()[ch] + eps).sqrt();
        let mu = running_mean.data()[ch];
        let g = gamma.data()[ch];
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dgamma.data_mut()[ch] += dy[j] * (xd[j] - mu) * is;
                dbeta.data_mut()[ch] += dy[j];
                dx.data_mut()[j] = dy[j] * g * is;
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::full(Shape::channels(c), g),
            Tensor::full(Shape::channels(c), b),
        )
    }

    #[test]
    fn constant_per_channel_input_yields_beta() {
        let x = Tensor::<f64>::from_fn(Shape::new(4, 3, 5, 5), |[_, c, _, _]| c as f64 * 3.0 - 1.0);
        let gamma = Tensor::from_vec(Shape::channels(3), vec![2.0, 0.5, -1.0]).unwrap();
        let beta = Tensor::from_vec(Shape::channels(3), vec![0.1, -0.2, 0.3]).unwrap();
        let (y, _) = batchnorm2d_train(&x, &gamma, &beta, BN_EPS).unwrap();
        for ch in 0..3 {
            for i in 0..4 {
                assert_eq!(y.at([i, ch, 2, 3]), beta.data()[ch]);
            }
        }
    }

    #[test]
    fn eval_with_unit_running_stats_is_identity_up_to_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 3, 3), 1.0, &mut rng);
        let (g, b) = affine(4, 1.0, 0.0);
        let rm = Tensor::zeros(Shape::channels(4));
        let rv = Tensor::full(Shape::channels(4), 1.0);
        let y = batchnorm2d_eval(&x, &g, &b, &rm, &rv, BN_EPS).unwrap();
        // y = x / sqrt(1 + eps)
        let tol = BN_EPS * x.max_abs();
        assert!(y.max_abs_diff(&x) <= tol, "{}", y.max_abs_diff(&x));
    }

    #[test]
    fn train_output_has_beta_mean_and_gamma_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(Shape::new(8, 3, 6, 6), 3.0, &mut rng).map(|v| v + 5.0);
        let gamma = Tensor::from_vec(Shape::channels(3), vec![1.5, 0.7, 2.0]).unwrap();
        let beta = Tensor::from_vec(Shape::channels(3), vec![-1.0, 0.25, 4.0]).unwrap();
        let (y, _) = batchnorm2d_train(&x, &gamma, &beta, BN_EPS).unwrap();
        for ch in 0..3 {
            // recompute statistics directly from the output
            let vals: Vec<f64> = (0..8)
                .flat_map(|i| (0..36).map(move |p| (i, p)))
                .map(|(i, p)| y.at([i, ch, p / 6, p % 6]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - beta.data()[ch]).abs() < 1e-5);
            assert!((var.sqrt() - gamma.data()[ch]).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sample_train_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let (g, b) = affine(2, 1.0, 0.0);
        assert!(matches!(
            batchnorm2d_train(&x, &g, &b, BN_EPS),
            Err(Error::BatchTooSmall { batch: 1, .. })
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 1, 1, 2), |[n, _, _, w]| (2 * n + w) as f64);
        let (g, b) = affine(1, 1.0, 0.0);
        let (_, cache) = batchnorm2d_train(&x, &g, &b, BN_EPS).unwrap();
        let mut rm = Tensor::zeros(Shape::channels(1));
        let mut rv = Tensor::full(Shape::channels(1), 1.0);
        update_running(&mut rm, &mut rv, &cache, 4, BN_MOMENTUM);
        // values 0,1,2,3: mean 1.5, unbiased var 5/3
        assert!((rm.data()[0] - 0.15).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
