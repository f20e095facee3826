//! Shared fixtures for the criterion benches.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pseudoseg::maskgen::{rasterize_ellipse, sample_ellipse_params};
use pseudoseg::{Canvas, EllipsePrior};

/// Uniform noise in [-1, 1] with a fixed seed.
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// A pair of random ellipse masks on a square canvas, as flat 0/1 pixels.
pub fn ellipse_pair(size: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let canvas = Canvas {
        size,
        pixel_mm: 3.2 * 64.0 / size as f64,
    };
    let prior = EllipsePrior::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let e = sample_ellipse_params(&mut rng, &prior, &canvas).unwrap();
        rasterize_ellipse(&e, &canvas).unwrap().pixels().to_vec()
    };
    (draw(), draw())
}
