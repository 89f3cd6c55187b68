//! Fixtures shared by the benchmarks.

use candle_core::{Device, Tensor};
use ndarray::Array2;
use svimo::config::RunConfig;
use svimo::rng::RngStream;

/// Desk config shrunk so one joint step stays in the tens of milliseconds.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.backbone.d_model = 32;
    c.model.backbone.d_time = 32;
    c.model.backbone.blocks = 1;
    c.model.backbone.heads = 2;
    c.model.vid.d_model = 32;
    c.model.vid.blocks = 1;
    c.model.vid.heads = 2;
    c.model.vid.visual_channels = 8;
    c.train.batch_size = 2;
    c
}

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = RngStream::new(seed, "bench");
    Tensor::from_vec(rng.normal_vec(shape.iter().product()), shape, &Device::Cpu).unwrap()
}

/// A textured 0–255 image and a copy shifted right by `dx` pixels.
pub fn shifted_pair(h: usize, w: usize, dx: usize) -> (Array2<f64>, Array2<f64>) {
    let a = Array2::from_shape_fn((h, w), |(y, x)| ((x * 37 + y * 11) % 97) as f64 * 2.5);
    let b = Array2::from_shape_fn((h, w), |(y, x)| a[[y, x.saturating_sub(dx)]]);
    (a, b)
}
