use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Piecewise-constant learning rate: `initial * factor^k` after the k-th
/// milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

/// SGD with (optionally Nesterov) momentum and L2 weight decay on
/// [`ParamKind::Weight`] buffers only.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, nesterov: bool, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "momentum {momentum} must be in [0, 1) and weight decay {weight_decay} >= 0"
            )));
        }
        Ok(Sgd {
            momentum,
            nesterov,
            weight_decay,
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `g += wd w; v <- mu v + g; w -= lr (g + mu v)` (Nesterov) or
    /// `w -= lr v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let decay = p.kind == ParamKind::Weight && self.weight_decay != 0.0;
            let w = p.value.data_mut();
            let g = p.grad.data();
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.data_mut()) {
                let g = if decay { g + wd * *w } else { g };
                *v = mu * *v + g;
                let d = if self.nesterov { g + mu * *v } else { *v };
                *w -= lr * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn schedule_milestones() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![150, 225],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(149), 0.1);
        assert!((s.lr_at(150) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(225) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn decay_only_on_weights() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor::full(Shape::new(1, 2, 1, 1), 2.0)).unwrap();
        let b = store.add("b", ParamKind::Affine, Tensor::full(Shape::new(1, 2, 1, 1), 2.0)).unwrap();
        let mut opt = Sgd::new(&store, 0.9, true, 1e-4).unwrap();
        opt.step(&mut store, 0.1);
        // v = wd w; step = lr (1 + mu) wd w under the Nesterov form
        let want = 2.0 - 0.1 * (1.0 + 0.9) * 1e-4 * 2.0;
        assert!((store.value(w).data()[0] - want).abs() < 1e-15);
        assert_eq!(store.value(b).data()[0], 2.0);
        let mut plain = Sgd::new(&store, 0.0, false, 1e-4).unwrap();
        let before = store.value(w).data()[0];
        plain.step(&mut store, 0.1);
        assert!((store.value(w).data()[0] - before * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
        assert!(Sgd::new(&store, 1.0, true, 0.0).is_err());
    }
}
