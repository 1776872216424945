//! Reconstruction, adversarial and gradient-penalty losses.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CraError, Result};
use crate::tensor::Tensor;

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// In-hole reconstruction weight.
    pub alpha1: f32,
    /// Context reconstruction weight.
    pub alpha2: f32,
    /// Adversarial weight in the generator loss.
    pub beta: f32,
    /// Gradient-penalty weight.
    pub sigma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 1.2,
            beta: 1e-4,
            sigma: 10.0,
        }
    }
}

pub(crate) fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CraError::InvalidArgument("mask must be binary".into()));
    }
    Ok(())
}

/// `alpha1 * mean(|out - x| * m) + alpha2 * mean(|out - x| * (1 - m))`.
/// Both means run over every element, so the two terms add up to the plain
/// L1 error when the weights are equal.
pub fn reconstruction(
    g: &mut Graph<'_>,
    out: Var,
    x: &Tensor,
    mask: &Tensor,
    w: &LossWeights,
) -> Result<Var> {
    check_binary(mask)?;
    let target = g.constant(x.clone());
    let diff = g.sub(out, target)?;
    let err = g.abs(diff)?;
    let m = g.constant(mask.clone());
    let keep = g.constant(mask.map(|v| 1.0 - v));
    let hole = g.mul(err, m)?;
    let hole = g.mean(hole)?;
    let ctx = g.mul(err, keep)?;
    let ctx = g.mean(ctx)?;
    let hole = g.scale(hole, w.alpha1)?;
    let ctx = g.scale(ctx, w.alpha2)?;
    g.add(hole, ctx)
}

/// `y * m + x * (1 - m)` with gradients flowing into `y` only.
pub fn paste_back(g: &mut Graph<'_>, y: Var, x: &Tensor, mask: &Tensor) -> Result<Var> {
    let outside = g.constant(x.mul(&mask.map(|v| 1.0 - v))?);
    let m = g.constant(mask.clone());
    let inside = g.mul(y, m)?;
    g.add(inside, outside)
}

/// One interpolation weight per batch item, uniform on `[0, 1)`.
pub fn sample_alphas(batch: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..batch).map(|_| rng.gen::<f32>()).collect()
}

/// `(1 - a) * real + a * fake` per batch item.
pub fn interpolate(real: &Tensor, fake: &Tensor, alphas: &[f32]) -> Result<Tensor> {
    let s = real.shape();
    if fake.shape() != s || alphas.len() != s.n {
        return Err(CraError::Shape(format!(
            "interpolating {s} with {} using {} weights",
            fake.shape(),
            alphas.len()
        )));
    }
    let per = s.c * s.h * s.w;
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let a = alphas[i / per];
            (1.0 - a) * r + a * f
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Critic terms of the discriminator loss.
#[derive(Clone, Copy, Debug)]
pub struct DLossParts {
    pub total: Var,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: Var,
    /// Unweighted `mean (|grad D(x_hat)| - 1)^2`.
    pub penalty: Var,
}

/// Discriminator loss with gradient penalty. `critic` maps a batch to
/// `(n, 1, 1, 1)` scores. The gradient norm is taken per sample over all
/// input coordinates and the squared deviation averaged over the batch.
pub fn d_loss<'s, F>(
    g: &mut Graph<'s>,
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    alphas: &[f32],
    sigma: f32,
) -> Result<DLossParts>
where
    F: Fn(&mut Graph<'s>, Var) -> Result<Var>,
{
    if real.shape() != fake.shape() {
        return Err(CraError::Shape(format!(
            "real {} vs fake {}",
            real.shape(),
            fake.shape()
        )));
    }
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let dr = critic(g, r)?;
    let df = critic(g, f)?;
    let dr = g.mean(dr)?;
    let df = g.mean(df)?;
    let wasserstein = g.sub(df, dr)?;

    let x_hat = g.variable(interpolate(real, fake, alphas)?);
    let d_hat = critic(g, x_hat)?;
    let d_hat = g.sum(d_hat)?;
    let grad = g.grad(d_hat, &[x_hat])?[0];
    let penalty = match grad {
        Some(gr) => {
            let sq = g.mul(gr, gr)?;
            let sq = g.sum_per_sample(sq)?;
            let norm = g.sqrt(sq)?;
            let dev = g.add_scalar(norm, -1.0)?;
            let dev2 = g.mul(dev, dev)?;
            g.mean(dev2)?
        }
        // a critic that ignores its input has zero gradient everywhere
        None => {
            let one = g.constant(Tensor::scalar(1.0));
            g.mean(one)?
        }
    };
    let weighted = g.scale(penalty, sigma)?;
    let total = g.add(wasserstein, weighted)?;
    Ok(DLossParts {
        total,
        wasserstein,
        penalty,
    })
}

/// `-mean D(fake)`.
pub fn adversarial(g: &mut Graph<'_>, d_fake: Var) -> Result<Var> {
    let m = g.mean(d_fake)?;
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{finite_diff_check, uniform, TOLERANCE};
    use crate::autograd::Params;
    use crate::conv::ConvParams;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quarter_mask(s: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, s, s), |_, _, y, x| {
            (y < s / 2 && x < s / 2) as u8 as f32
        })
    }

    #[test]
    fn perfect_output_has_zero_reconstruction() {
        let x = uniform(
            Shape::new(1, 3, 4, 4),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut g = Graph::new();
        let out = g.variable(x.clone());
        let l = reconstruction(&mut g, out, &x, &quarter_mask(4), &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn unit_error_with_quarter_hole() {
        let x = Tensor::zeros(Shape::new(2, 3, 8, 8));
        let w = LossWeights::default();
        let mut g = Graph::new();
        let out = g.variable(Tensor::full(x.shape(), 1.0));
        let mask = Tensor::stack(&[quarter_mask(8), quarter_mask(8)]).unwrap();
        let l = reconstruction(&mut g, out, &x, &mask, &w).unwrap();
        let expected = 0.25 * w.alpha1 as f64 + 0.75 * w.alpha2 as f64;
        assert!((g.scalar(l).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let mut g = Graph::new();
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let out = g.variable(x.clone());
        let m = Tensor::full(Shape::new(1, 1, 2, 2), 0.5);
        assert!(reconstruction(&mut g, out, &x, &m, &LossWeights::default()).is_err());
    }

    #[test]
    fn constant_critic_penalty_is_sigma() {
        let real = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let fake = Tensor::full(real.shape(), 0.5);
        let mut g = Graph::new();
        let parts = d_loss(
            &mut g,
            |g, _x| Ok(g.constant(Tensor::full(Shape::new(2, 1, 1, 1), 3.0))),
            &real,
            &fake,
            &[0.3, 0.7],
            10.0,
        )
        .unwrap();
        assert_eq!(g.scalar(parts.wasserstein).unwrap(), 0.0);
        assert_eq!(g.scalar(parts.total).unwrap(), 10.0);
    }

    #[test]
    fn unit_norm_linear_critic_has_no_penalty() {
        let s = Shape::new(1, 3, 4, 4);
        // 48 inputs, weight 0.25 on 16 of them: norm exactly 1
        let w = Tensor::from_fn(
            Shape::new(1, 48, 1, 1),
            |_, c, _, _| if c < 16 { 0.25 } else { 0.0 },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = uniform(s, -1.0, 1.0, &mut rng);
        let fake = uniform(s, -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let wv = g.constant(w);
        let parts = d_loss(&mut g, |g, x| g.dense(x, wv), &real, &fake, &[0.4], 10.0).unwrap();
        assert!(g.scalar(parts.penalty).unwrap().abs() < 1e-12);
    }

    /// `D(x) = sum elu(conv3x3(x, w))` evaluated by hand in f64.
    struct TinyCritic {
        w: Vec<f64>,
    }

    impl TinyCritic {
        fn pre(&self, x: &[f64]) -> Vec<f64> {
            let mut out = vec![0.0; 16];
            for y in 0..4i32 {
                for xx in 0..4i32 {
                    let mut acc = 0.0;
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                acc += self.w[(ky * 3 + kx) as usize] * x[(sy * 4 + sx) as usize];
                            }
                        }
                    }
                    out[(y * 4 + xx) as usize] = acc;
                }
            }
            out
        }

        fn value(&self, x: &[f64]) -> f64 {
            self.pre(x)
                .iter()
                .map(|&v| if v >= 0.0 { v } else { v.exp() - 1.0 })
                .sum()
        }

        fn grad(&self, x: &[f64]) -> Vec<f64> {
            let d: Vec<f64> = self
                .pre(x)
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { v.exp() })
                .collect();
            let mut g = vec![0.0; 16];
            for y in 0..4i32 {
                for xx in 0..4i32 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                g[(sy * 4 + sx) as usize] +=
                                    self.w[(ky * 3 + kx) as usize] * d[(y * 4 + xx) as usize];
                            }
                        }
                    }
                }
            }
            g
        }
    }

    #[test]
    fn d_loss_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(2, 1, 4, 4);
        let real = uniform(s, -1.0, 1.0, &mut rng);
        let fake = uniform(s, -1.0, 1.0, &mut rng);
        let wt = uniform(Shape::new(1, 1, 3, 3), -0.6, 0.6, &mut rng);
        let alphas = [0.25f32, 0.8];
        let sigma = 10.0;

        let mut g = Graph::new();
        let wv = g.constant(wt.clone());
        let critic = |g: &mut Graph<'_>, x: Var| {
            let c = g.conv2d(x, wv, ConvParams::new(1, 1))?;
            let e = g.elu(c)?;
            g.sum_per_sample(e)
        };
        let got = d_loss(&mut g, critic, &real, &fake, &alphas, sigma).unwrap();
        let got = g.scalar(got.total).unwrap();

        let oracle = TinyCritic {
            w: wt.data().iter().map(|&v| v as f64).collect(),
        };
        let item = |t: &Tensor, n: usize| -> Vec<f64> {
            t.data()[n * 16..(n + 1) * 16]
                .iter()
                .map(|&v| v as f64)
                .collect()
        };
        let mut wass = 0.0;
        let mut pen = 0.0;
        for n in 0..2 {
            let (r, f) = (item(&real, n), item(&fake, n));
            wass += (oracle.value(&f) - oracle.value(&r)) / 2.0;
            let a = alphas[n] as f64;
            let xh: Vec<f64> = r
                .iter()
                .zip(&f)
                .map(|(r, f)| (1.0 - a) * r + a * f)
                .collect();
            let norm = oracle.grad(&xh).iter().map(|v| v * v).sum::<f64>().sqrt();
            pen += (norm - 1.0).powi(2) / 2.0;
        }
        let want = wass + sigma as f64 * pen;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape::new(2, 1, 4, 4);
        let real = uniform(s, 0.0, 0.5, &mut rng);
        let fake = uniform(s, 0.0, 0.5, &mut rng);
        let mut params = Params::new();
        params.insert(
            "w".into(),
            uniform(Shape::new(1, 1, 3, 3), 0.1, 0.5, &mut rng),
        );
        let build = |g: &mut Graph<'_>| {
            let w = g.param("w")?;
            let critic = |g: &mut Graph<'_>, x: Var| {
                let c = g.conv2d(x, w, ConvParams::new(1, 1))?;
                let c = g.add_scalar(c, -3.0)?;
                let e = g.elu(c)?;
                g.sum_per_sample(e)
            };
            Ok(d_loss(g, critic, &real, &fake, &[0.3, 0.6], 10.0)?.total)
        };
        let err = finite_diff_check(&params, "w", 1e-3, 9, &mut rng, build).unwrap();
        assert!(err < TOLERANCE, "{err}");
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(Shape::new(1, 3, 4, 4), -1.0, -0.5, &mut rng);
        let mut params = Params::new();
        params.insert("y".into(), uniform(x.shape(), 0.0, 1.0, &mut rng));
        let mask = quarter_mask(4);
        let build = |g: &mut Graph<'_>| {
            let y = g.param("y")?;
            reconstruction(g, y, &x, &mask, &LossWeights::default())
        };
        let err = finite_diff_check(&params, "y", 1e-3, 48, &mut rng, build).unwrap();
        assert!(err < TOLERANCE, "{err}");
    }

    #[test]
    fn doubling_beta_doubles_the_adversarial_term() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.75, -1.5]).unwrap());
        let adv = adversarial(&mut g, d).unwrap();
        let a = g.scale(adv, 1e-4).unwrap();
        let b = g.scale(adv, 2e-4).unwrap();
        assert_eq!(g.scalar(b).unwrap(), 2.0 * g.scalar(a).unwrap());
    }
}
