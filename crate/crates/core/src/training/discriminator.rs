//! Convolutional critic: six stride-2 3x3 convolutions with ELU, then a
//! dense map to one score per image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Exec, Params};
use crate::conv::ConvParams;
use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

pub const CHANNELS: [usize; 6] = [64, 128, 256, 256, 256, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input_size: usize,
    pub channels: [usize; 6],
}

impl Discriminator {
    /// Channel counts scaled by `width`, at least one each.
    pub fn new(input_size: usize, width: f32) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(64) {
            return Err(CraError::InvalidArgument(format!(
                "critic input size must be a positive multiple of 64, got {input_size}"
            )));
        }
        Ok(Discriminator {
            input_size,
            channels: CHANNELS.map(|c| ((c as f32 * width).round() as usize).max(1)),
        })
    }

    fn dense_len(&self) -> usize {
        let side = self.input_size / 64;
        self.channels[5] * side * side
    }

    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("disc.{i:02}.w"), Shape::new(c, cin, 3, 3)));
            out.push((format!("disc.{i:02}.b"), Shape::new(1, c, 1, 1)));
            cin = c;
        }
        out.push(("disc.dense.w".into(), Shape::new(1, self.dense_len(), 1, 1)));
        out.push(("disc.dense.b".into(), Shape::scalar()));
        out
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let bound = (3.0 / (shape.c * shape.h * shape.w) as f32).sqrt();
                    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
                };
                (name, t)
            })
            .collect()
    }

    /// Scores of shape `(n, 1, 1, 1)`.
    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Var) -> Result<E::Var> {
        let s = ex.value(x).shape();
        if s.c != 3 || s.h != self.input_size || s.w != self.input_size {
            return Err(CraError::Shape(format!(
                "critic expects (n, 3, {0}, {0}), got {s}",
                self.input_size
            )));
        }
        let mut cur = x.clone();
        for i in 0..self.channels.len() {
            let w = ex.param(&format!("disc.{i:02}.w"))?;
            let b = ex.param(&format!("disc.{i:02}.b"))?;
            let c = ex.conv2d(&cur, &w, ConvParams::new(2, 1))?;
            let c = ex.bias_add(&c, &b)?;
            cur = ex.elu(&c)?;
        }
        let w = ex.param("disc.dense.w")?;
        let b = ex.param("disc.dense.b")?;
        let d = ex.dense(&cur, &w)?;
        ex.bias_add(&d, &b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eager, Graph};

    #[test]
    fn one_score_per_item() {
        let d = Discriminator::new(64, 0.125).unwrap();
        let p = d.init(0);
        let x = Tensor::full(Shape::new(3, 3, 64, 64), 0.2);
        let mut ex = Eager::new(&p);
        let s = d.forward(&mut ex, &x).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 1, 1, 1));
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let d = Discriminator::new(64, 0.125).unwrap();
        let p = d.init(1);
        let mut g = Graph::with_params(&p);
        let x = g.constant(Tensor::full(Shape::new(1, 3, 64, 64), 0.5));
        let s = d.forward(&mut g, &x).unwrap();
        let s = g.sum(s).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), p.len());
    }

    #[test]
    fn full_width_channels() {
        let d = Discriminator::new(512, 1.0).unwrap();
        assert_eq!(d.channels, CHANNELS);
        assert_eq!(d.param_shapes().last().unwrap().1, Shape::scalar());
        assert_eq!(d.param_shapes()[12].1, Shape::new(1, 256 * 8 * 8, 1, 1));
    }
}
