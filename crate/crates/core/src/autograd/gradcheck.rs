use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{compute_scores_with_patch, partition_cells, AttentionScores};
use crate::conv::ConvParams;
use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

use super::graph::{Graph, Var};
use super::Params;

/// Builds a scalar loss from a graph bound to some parameters.
pub trait LossFn: for<'a, 's> Fn(&'a mut Graph<'s>) -> Result<Var> {}
impl<F> LossFn for F where F: for<'a, 's> Fn(&'a mut Graph<'s>) -> Result<Var> {}

fn eval(params: &Params, build: &impl LossFn) -> Result<f64> {
    let mut g = Graph::with_params(params);
    let l = build(&mut g)?;
    g.scalar(l)
}

/// Maximum relative error between the analytic gradient of parameter
/// `name` and central differences, over `samples` random coordinates (all
/// coordinates when the tensor is small enough).
pub fn finite_diff_check(
    params: &Params,
    name: &str,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
    build: impl LossFn,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(CraError::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let analytic = {
        let mut g = Graph::with_params(params);
        let l = build(&mut g)?;
        let grads = g.backward(l)?;
        grads
            .get(name)
            .cloned()
            .ok_or_else(|| CraError::WeightMismatch(format!("`{name}` is not used by the loss")))?
    };
    let base = params
        .get(name)
        .ok_or_else(|| CraError::WeightMismatch(format!("missing parameter `{name}`")))?;
    let coords: Vec<usize> = if samples >= base.len() {
        (0..base.len()).collect()
    } else {
        index::sample(rng, base.len(), samples).into_vec()
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in coords {
        let theta = base.data()[i] as f64;
        let plus = (theta + eps) as f32;
        let minus = (theta - eps) as f32;
        probe.get_mut(name).unwrap().data_mut()[i] = plus;
        let lp = eval(&probe, &build)?;
        probe.get_mut(name).unwrap().data_mut()[i] = minus;
        let lm = eval(&probe, &build)?;
        probe.get_mut(name).unwrap().data_mut()[i] = base.data()[i];
        let fd = (lp - lm) / (plus as f64 - minus as f64);
        let a = analytic.data()[i] as f64;
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

/// Uniform tensor in `[lo, hi)`.
pub fn uniform(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and random sign, keeping clear of
/// zero where kinks live.
pub fn away_from_zero(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Random weights from {0.5, 1, 2}. Multiplying by a power of two is exact,
/// so the projection adds no rounding noise to the loss.
pub fn projection(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| [0.5, 1.0, 2.0][rng.gen_range(0..3)])
}

/// `sum(out * r)` for a fixed random projection `r`.
pub fn project(g: &mut Graph<'_>, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    g.sum(prod)
}

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// Result of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Case {
    name: &'static str,
    params: Params,
    wrt: Vec<&'static str>,
    build: Box<dyn for<'a, 's> Fn(&'a mut Graph<'s>) -> Result<Var>>,
}

fn params(entries: Vec<(&str, Tensor)>) -> Params {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn transfer_scores(rng: &mut ChaCha8Rng) -> Result<Arc<Vec<AttentionScores>>> {
    let mut mask = Tensor::zeros(Shape::new(1, 1, 4, 4));
    for y in 1..3 {
        for x in 0..2 {
            mask.set(0, 0, y, x, 1.0);
        }
    }
    let part = partition_cells(&mask, 4)?;
    let map = uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, rng);
    Ok(Arc::new(vec![compute_scores_with_patch(&map, &part, 1)?]))
}

fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let s = |c, h, w| Shape::new(2, c, h, w);
    let mut out = Vec::new();
    let conv_cfgs: [(&str, usize, usize, usize); 4] = [
        ("conv2d", 1, 1, 1),
        ("conv2d_stride2", 2, 1, 1),
        ("conv2d_dilated", 1, 2, 1),
        ("conv2d_grouped", 1, 1, 2),
    ];
    for (name, stride, dil, groups) in conv_cfgs {
        let p = ConvParams::grouped(stride, dil, groups);
        let oh = 7usize.div_ceil(stride);
        let r = projection(s(4, oh, oh), rng);
        out.push(Case {
            name,
            params: params(vec![
                ("x", uniform(s(4, 7, 7), 0.0, 0.25, rng)),
                (
                    "w",
                    uniform(Shape::new(4, 4 / groups, 3, 3), 0.05, 0.5, rng),
                ),
            ]),
            wrt: vec!["x", "w"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let w = g.param("w")?;
                let y = g.conv2d(x, w, p)?;
                project(g, y, &r)
            }),
        });
    }
    // second order: the gradient of a conv with respect to its input,
    // differentiated again, exercises both adjoint kernels
    {
        let r = projection(s(3, 6, 6), rng);
        let r2 = projection(s(2, 6, 6), rng);
        let p = ConvParams::new(1, 1);
        out.push(Case {
            name: "conv2d_double_backward",
            params: params(vec![
                ("x", uniform(s(2, 6, 6), 0.0, 0.3, rng)),
                ("w", uniform(Shape::new(3, 2, 3, 3), 0.05, 0.5, rng)),
            ]),
            wrt: vec!["x", "w"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let w = g.param("w")?;
                let y = g.conv2d(x, w, p)?;
                // conv output is at most 2.7, so the shift keeps every value on the
                // negative elu branch, away from the kink in its second derivative
                let y = g.add_scalar(y, -3.0)?;
                let e = g.elu(y)?;
                let l = project(g, e, &r)?;
                let dx = g.grad(l, &[x])?[0].expect("input gradient");
                project(g, dx, &r2)
            }),
        });
    }
    {
        let r = projection(s(3, 5, 5), rng);
        out.push(Case {
            name: "bias_add",
            params: params(vec![
                ("x", uniform(s(3, 5, 5), -1.0, 1.0, rng)),
                ("b", uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, rng)),
            ]),
            wrt: vec!["x", "b"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let b = g.param("b")?;
                let y = g.bias_add(x, b)?;
                project(g, y, &r)
            }),
        });
    }
    type Unary = fn(&mut Graph<'_>, Var) -> Result<Var>;
    let unaries: [(&str, Unary, f32, f32); 8] = [
        ("elu", |g, x| g.elu(x), 0.05, 2.0),
        ("sigmoid", |g, x| g.sigmoid(x), 0.0, 2.0),
        ("scale", |g, x| g.scale(x, -1.7), 0.0, 2.0),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3), 0.0, 2.0),
        ("abs", |g, x| g.abs(x), 0.05, 2.0),
        ("clip", |g, x| g.clip(x, -1.0, 1.0), 0.05, 0.9),
        ("avg_pool", |g, x| g.avg_pool(x, 2), 0.0, 2.0),
        ("nearest_up", |g, x| g.nearest_up(x, 2), 0.0, 2.0),
    ];
    for (name, f, lo, hi) in unaries {
        let x = away_from_zero(s(2, 6, 6), lo, hi, rng);
        let mut probe = Graph::new();
        let v = probe.constant(x.clone());
        let y = f(&mut probe, v)?;
        let r = projection(probe.value(y).shape(), rng);
        out.push(Case {
            name,
            params: params(vec![("x", x)]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let y = f(g, x)?;
                project(g, y, &r)
            }),
        });
    }
    // clip beyond the bounds passes no gradient
    {
        let x = away_from_zero(s(1, 4, 4), 1.2, 2.0, rng);
        let r = projection(s(1, 4, 4), rng);
        out.push(Case {
            name: "clip_saturated",
            params: params(vec![("x", x)]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.clip(x, -1.0, 1.0)?;
                let y = g.add(y, x)?;
                project(g, y, &r)
            }),
        });
    }
    {
        let x = uniform(s(2, 4, 4), 0.2, 2.0, rng);
        let r = projection(s(2, 4, 4), rng);
        out.push(Case {
            name: "sqrt",
            params: params(vec![("x", x)]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.sqrt(x)?;
                project(g, y, &r)
            }),
        });
    }
    type Binary = fn(&mut Graph<'_>, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary, usize); 6] = [
        ("add", |g, a, b| g.add(a, b), 3),
        ("sub", |g, a, b| g.sub(a, b), 3),
        ("mul", |g, a, b| g.mul(a, b), 3),
        ("add_broadcast", |g, a, b| g.add(a, b), 1),
        ("sub_broadcast", |g, a, b| g.sub(a, b), 1),
        ("mul_broadcast", |g, a, b| g.mul(a, b), 1),
    ];
    for (name, f, bc) in binaries {
        let r = projection(s(3, 5, 5), rng);
        out.push(Case {
            name,
            params: params(vec![
                ("a", uniform(s(3, 5, 5), 0.2, 1.5, rng)),
                ("b", away_from_zero(s(bc, 5, 5), 0.2, 1.5, rng)),
            ]),
            wrt: vec!["a", "b"],
            build: Box::new(move |g| {
                let a = g.param("a")?;
                let b = g.param("b")?;
                let y = f(g, a, b)?;
                project(g, y, &r)
            }),
        });
    }
    {
        let r = projection(s(5, 4, 4), rng);
        out.push(Case {
            name: "concat_channels",
            params: params(vec![
                ("a", uniform(s(2, 4, 4), -1.0, 1.0, rng)),
                ("b", uniform(s(3, 4, 4), -1.0, 1.0, rng)),
            ]),
            wrt: vec!["a", "b"],
            build: Box::new(move |g| {
                let a = g.param("a")?;
                let b = g.param("b")?;
                let y = g.concat(&[a, b])?;
                project(g, y, &r)
            }),
        });
    }
    {
        let r = projection(s(2, 4, 4), rng);
        out.push(Case {
            name: "slice_channels",
            params: params(vec![("x", uniform(s(5, 4, 4), -1.0, 1.0, rng))]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.slice_channels(x, 1, 2)?;
                project(g, y, &r)
            }),
        });
    }
    {
        let r = projection(s(1, 1, 1), rng);
        out.push(Case {
            name: "sum_mean_reductions",
            params: params(vec![("x", uniform(s(2, 3, 3), 0.1, 0.5, rng))]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let sq = g.mul(x, x)?;
                let ps = g.sum_per_sample(sq)?;
                let y = project(g, ps, &r)?;
                let m = g.mean(x)?;
                g.add(y, m)
            }),
        });
    }
    {
        let scores = transfer_scores(rng)?;
        let r = projection(Shape::new(1, 2, 8, 8), rng);
        out.push(Case {
            name: "attention_transfer",
            params: params(vec![("x", uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, rng))]),
            wrt: vec!["x"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.transfer(x, &scores)?;
                project(g, y, &r)
            }),
        });
    }
    {
        let r = projection(Shape::new(2, 1, 1, 1), rng);
        out.push(Case {
            name: "dense",
            params: params(vec![
                ("x", uniform(s(3, 4, 4), 0.02, 0.1, rng)),
                ("w", away_from_zero(Shape::new(1, 48, 1, 1), 0.05, 0.5, rng)),
            ]),
            wrt: vec!["x", "w"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let w = g.param("w")?;
                let y = g.dense(x, w)?;
                let y = g.elu(y)?;
                project(g, y, &r)
            }),
        });
    }
    {
        let r = projection(s(3, 8, 8), rng);
        let p = ConvParams::new(1, 1);
        // two hidden channels stay positive and two negative, so both elu
        // branches are exercised without sign cancellation in the gradients
        let hidden_bias = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| {
            [0.5, 0.2, -2.5, -3.0][c] + rng.gen_range(-0.05..0.05)
        });
        out.push(Case {
            name: "two_layer_conv_net",
            params: params(vec![
                ("x", uniform(s(2, 8, 8), 0.0, 1.0, rng)),
                ("w1", uniform(Shape::new(4, 2, 3, 3), 0.0, 0.3, rng)),
                ("b1", hidden_bias),
                ("w2", uniform(Shape::new(3, 4, 3, 3), 0.05, 0.5, rng)),
            ]),
            wrt: vec!["w1", "b1", "w2"],
            build: Box::new(move |g| {
                let x = g.param("x")?;
                let w1 = g.param("w1")?;
                let b1 = g.param("b1")?;
                let w2 = g.param("w2")?;
                let h = g.conv2d(x, w1, p)?;
                let h = g.bias_add(h, b1)?;
                let h = g.elu(h)?;
                let y = g.conv2d(h, w2, p)?;
                project(g, y, &r)
            }),
        });
    }
    Ok(out)
}

/// Runs the finite-difference check over every differentiable op, one
/// report per op and parameter.
pub fn check_all_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in cases(&mut rng)? {
        for name in &case.wrt {
            let err = finite_diff_check(&case.params, name, EPS, 64, &mut rng, &case.build)?;
            reports.push(CheckReport {
                name: format!("{}/{}", case.name, name),
                max_rel_error: err,
            });
        }
    }
    Ok(reports)
}
