//! Adam with bias correction.

use crate::autograd::{GradMap, Params};
use crate::error::{CraError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                CraError::WeightMismatch(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(CraError::Shape(format!(
                    "gradient of `{name}` is {}, parameter is {}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi as f64 / bc1;
                let vh = *vi as f64 / bc2;
                let delta = (c.lr as f64 * mh / (vh.sqrt() + c.eps as f64)) as f32;
                if delta != 0.0 {
                    *pi -= delta;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Params::new();
        p.insert(
            "a".into(),
            Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap(),
        );
        let mut g = GradMap::new();
        g.insert(
            "a".into(),
            Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -0.01]).unwrap(),
        );
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g).unwrap();
        let d = p["a"].data();
        assert!((d[0] - (1.0 - 1e-4)).abs() < 1e-7);
        assert!((d[1] - (1.0 + 1e-4)).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let mut p = Params::new();
        p.insert(
            "a".into(),
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.1, -7.25, 3.0]).unwrap(),
        );
        let before = p.clone();
        let mut g = GradMap::new();
        g.insert(
            "a".into(),
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, -5.0]).unwrap(),
        );
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..10 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Params::new();
        p.insert("x".into(), Tensor::scalar(4.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        for _ in 0..500 {
            let mut g = GradMap::new();
            g.insert("x".into(), Tensor::scalar(2.0 * (p["x"].data()[0] - 1.5)));
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p["x"].data()[0] - 1.5).abs() < 1e-2);
    }
}
