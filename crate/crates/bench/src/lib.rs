//! Shared inputs for the benchmarks.

use btol_core::netcore::SplitMix64;
use btol_core::{LabelTensor, Tensor};

/// Uniform `[0, 1)` tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.next_f64() as f32)
}

/// `size×size` mask with a centred disc of class 1 around a smaller disc of class 2.
pub fn disc_mask(size: usize, offset: f64) -> LabelTensor {
    let c = size as f64 / 2.0 + offset;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let d = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
            if d < size as f64 * 0.15 {
                2
            } else if d < size as f64 * 0.3 {
                1
            } else {
                0
            }
        })
        .collect();
    LabelTensor::new(vec![size, size], data).expect("square mask")
}
