//! Seeded inputs shared by the benchmarks.

use cra_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0f32..1.0))
}

/// A `(1, 1, size, size)` mask with a centred square hole covering a
/// sixteenth of the image.
pub fn square_mask(size: usize) -> Tensor {
    let (lo, hi) = (size * 3 / 8, size * 5 / 8);
    Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
        ((lo..hi).contains(&y) && (lo..hi).contains(&x)) as u8 as f32
    })
}
