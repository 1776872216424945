//! Training images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CraError, Result};
use crate::io::{load_image, pixel_to_value};
use crate::tensor::{Shape, Tensor};

/// Square RGB images of one size, each `(1, 3, s, s)` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(size: usize, images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(CraError::Training("dataset is empty".into()));
        }
        for (i, t) in images.iter().enumerate() {
            if t.shape() != Shape::new(1, 3, size, size) {
                return Err(CraError::Dimension(format!(
                    "image {i} is {}, expected (1, 3, {size}, {size})",
                    t.shape()
                )));
            }
        }
        Ok(Dataset { size, images })
    }

    /// Every PNG in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| CraError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| {
                let t = load_image(p)?;
                if t.shape().h != size || t.shape().w != size {
                    return Err(CraError::Dimension(format!(
                        "{} is {}x{}, expected {size}x{size}",
                        p.display(),
                        t.shape().w,
                        t.shape().h
                    )));
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(CraError::Training(format!(
                "no PNG images in {}",
                dir.display()
            )));
        }
        Dataset::new(size, images)
    }

    /// Smooth colour gradients with a few soft blobs, quantized to 8 bits.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count)
            .map(|_| {
                let base: [[f64; 3]; 3] =
                    std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.0..255.0)));
                let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..4))
                    .map(|_| {
                        (
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.08..0.3),
                            std::array::from_fn(|_| rng.gen_range(-120.0..120.0)),
                        )
                    })
                    .collect();
                Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
                    let (u, v) = (y as f64 / size as f64, x as f64 / size as f64);
                    let mut p =
                        base[0][c] * (1.0 - u) + base[1][c] * u * (1.0 - v) + base[2][c] * u * v;
                    for &(by, bx, r, col) in &blobs {
                        let d2 = ((u - by).powi(2) + (v - bx).powi(2)) / (r * r);
                        p += col[c] * (-d2).exp();
                    }
                    pixel_to_value(p.round().clamp(0.0, 255.0) as u8)
                })
            })
            .collect();
        Dataset::new(size, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
