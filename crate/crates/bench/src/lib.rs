//! Seeded inputs shared by the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rla_core::{Shape, Tensor};

pub fn randn(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(Shape::new(n, c, h, w), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `(cin, cout, kernel, side)` of the convs that dominate a CIFAR
/// bottleneck ResNet.
pub const CONV_CASES: [(usize, usize, usize, usize); 3] = [(16, 16, 3, 32), (64, 16, 1, 32), (64, 64, 3, 8)];
