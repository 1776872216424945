//! Gated convolutions: the original full gate and three light-weight
//! variants that compute the gate more cheaply.
//!
//! Every variant outputs `sigmoid(G) * elu(F)` where `F` is an ordinary
//! convolution with bias and `G` is a bias-free gate branch.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{
    finite_diff_check, project, projection, uniform, CheckReport, EPS,
};
use crate::autograd::{Exec, Graph, Params};
use crate::conv::ConvParams;
use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    /// Full `k x k x Cin x Cout` gate kernel.
    Gc,
    /// Depthwise `k x k` gate followed by a pointwise `1 x 1`.
    LwgcDs,
    /// Pointwise `1 x 1` gate.
    LwgcPw,
    /// Single-channel gate broadcast over all feature channels.
    LwgcSc,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::Gc,
        GateKind::LwgcDs,
        GateKind::LwgcPw,
        GateKind::LwgcSc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::Gc => "gc",
            GateKind::LwgcDs => "lwgc_ds",
            GateKind::LwgcPw => "lwgc_pw",
            GateKind::LwgcSc => "lwgc_sc",
        }
    }

    /// Channels of the gate map.
    pub fn gate_channels(self, cout: usize) -> usize {
        match self {
            GateKind::LwgcSc => 1,
            _ => cout,
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateKind {
    type Err = CraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gc" => Ok(GateKind::Gc),
            "lwgc_ds" | "ds" => Ok(GateKind::LwgcDs),
            "lwgc_pw" | "pw" => Ok(GateKind::LwgcPw),
            "lwgc_sc" | "sc" => Ok(GateKind::LwgcSc),
            other => Err(CraError::InvalidArgument(format!(
                "unknown gate kind `{other}` (expected gc, lwgc_ds, lwgc_pw or lwgc_sc)"
            ))),
        }
    }
}

/// Weights needed to compute the gate of one layer, bias excluded.
pub fn gate_param_count(kind: GateKind, hk: usize, wk: usize, cin: usize, cout: usize) -> usize {
    match kind {
        GateKind::Gc => hk * wk * cin * cout,
        GateKind::LwgcDs => hk * wk * cin + cin * cout,
        GateKind::LwgcPw => cin * cout,
        GateKind::LwgcSc => hk * wk * cin,
    }
}

/// Geometry and naming of one gated convolution. Weights live in a
/// [`Params`] map under `{name}.feat.w`, `{name}.feat.b` and the gate
/// tensors listed by [`GatedConvLayer::gate_shapes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatedConvLayer {
    pub name: String,
    pub kind: GateKind,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl GatedConvLayer {
    pub fn feature_weight(&self) -> String {
        format!("{}.feat.w", self.name)
    }

    pub fn feature_bias(&self) -> String {
        format!("{}.feat.b", self.name)
    }

    pub fn gate_shapes(&self) -> Vec<(String, Shape)> {
        let k = self.kernel;
        let n = &self.name;
        match self.kind {
            GateKind::Gc => vec![(format!("{n}.gate.w"), Shape::new(self.cout, self.cin, k, k))],
            GateKind::LwgcDs => vec![
                (format!("{n}.gate.dw"), Shape::new(self.cin, 1, k, k)),
                (
                    format!("{n}.gate.pw"),
                    Shape::new(self.cout, self.cin, 1, 1),
                ),
            ],
            GateKind::LwgcPw => {
                vec![(format!("{n}.gate.w"), Shape::new(self.cout, self.cin, 1, 1))]
            }
            GateKind::LwgcSc => vec![(format!("{n}.gate.w"), Shape::new(1, self.cin, k, k))],
        }
    }

    /// Every tensor the layer owns, feature branch first.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut v = vec![
            (
                self.feature_weight(),
                Shape::new(self.cout, self.cin, self.kernel, self.kernel),
            ),
            (self.feature_bias(), Shape::new(1, self.cout, 1, 1)),
        ];
        v.extend(self.gate_shapes());
        v
    }

    pub fn gate_param_count(&self) -> usize {
        gate_param_count(self.kind, self.kernel, self.kernel, self.cin, self.cout)
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.numel()).sum()
    }

    /// Uniform fan-in scaled weights and zero biases.
    pub fn init(&self, rng: &mut impl Rng, into: &mut Params) {
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in = (shape.c * shape.h * shape.w) as f32;
                let gain = if name.contains(".gate.") { 3.0 } else { 6.0 };
                let bound = (gain / fan_in).sqrt();
                Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
            };
            into.insert(name, t);
        }
    }

    fn conv_params(&self) -> ConvParams {
        ConvParams::new(self.stride, self.dilation)
    }

    /// Gate logits `G`.
    pub fn gate<E: Exec>(&self, ex: &mut E, x: &E::Var) -> Result<E::Var> {
        let shapes = self.gate_shapes();
        match self.kind {
            GateKind::Gc | GateKind::LwgcSc => {
                let w = ex.param(&shapes[0].0)?;
                ex.conv2d(x, &w, self.conv_params())
            }
            GateKind::LwgcPw => {
                let w = ex.param(&shapes[0].0)?;
                ex.conv2d(x, &w, ConvParams::new(self.stride, 1))
            }
            GateKind::LwgcDs => {
                let dw = ex.param(&shapes[0].0)?;
                let pw = ex.param(&shapes[1].0)?;
                let depth = ex.conv2d(
                    x,
                    &dw,
                    ConvParams::grouped(self.stride, self.dilation, self.cin),
                )?;
                ex.conv2d(&depth, &pw, ConvParams::new(1, 1))
            }
        }
    }

    /// `sigmoid(G) * elu(F)`; a single-channel gate is broadcast.
    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Var) -> Result<E::Var> {
        let c = ex.value(x).shape().c;
        if c != self.cin {
            return Err(CraError::Shape(format!(
                "layer {} expects {} input channels, got {c}",
                self.name, self.cin
            )));
        }
        let wf = ex.param(&self.feature_weight())?;
        let bf = ex.param(&self.feature_bias())?;
        let f = ex.conv2d(x, &wf, self.conv_params())?;
        let f = ex.bias_add(&f, &bf)?;
        let f = ex.elu(&f)?;
        let g = self.gate(ex, x)?;
        let g = ex.sigmoid(&g)?;
        ex.mul(&g, &f)
    }
}

/// Finite-difference checks of a gated layer for every gate kind, once with
/// the feature map on the linear elu branch and once on the exponential one.
pub fn check_gated_layers(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for kind in GateKind::ALL {
        for (branch, stride, dilation, bias, gate_sign) in [
            ("linear", 1, 1, 0.2f32, 1.0f32),
            ("exponential", 1, 2, -2.0, -1.0),
        ] {
            let layer = GatedConvLayer {
                name: "l".into(),
                kind,
                cin: 3,
                cout: 4,
                kernel: 3,
                stride,
                dilation,
            };
            // non-negative inputs and same-signed weights keep the summed
            // gradient terms from cancelling below the f32 noise floor
            let mut params = Params::new();
            params.insert(
                "x".into(),
                uniform(Shape::new(2, 3, 8, 8), 0.0, 0.2, &mut rng),
            );
            for (name, shape) in layer.param_shapes() {
                let t = if name.ends_with(".b") {
                    Tensor::full(shape, bias)
                } else if name.ends_with(".gate.pw") {
                    // the depthwise factor carries the sign
                    uniform(shape, 0.1, 0.6, &mut rng)
                } else if name.contains(".gate.") {
                    uniform(shape, 0.1, 0.6, &mut rng).scale(gate_sign)
                } else {
                    uniform(shape, 0.05, 0.3, &mut rng)
                };
                params.insert(name, t);
            }
            let out = 8usize.div_ceil(stride);
            let r = projection(Shape::new(2, 4, out, out), &mut rng);
            let names: Vec<String> = params.keys().cloned().collect();
            for name in names {
                let l = layer.clone();
                let r = r.clone();
                let err = finite_diff_check(
                    &params,
                    &name,
                    EPS,
                    48,
                    &mut rng,
                    move |g: &mut Graph<'_>| {
                        let x = g.param("x")?;
                        let y = l.forward(g, &x)?;
                        project(g, y, &r)
                    },
                )?;
                reports.push(CheckReport {
                    name: format!("{kind}/{branch}/{name}"),
                    max_rel_error: err,
                });
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::uniform;
    use crate::autograd::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(
        kind: GateKind,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> GatedConvLayer {
        GatedConvLayer {
            name: "l".into(),
            kind,
            cin,
            cout,
            kernel: 3,
            stride,
            dilation,
        }
    }

    #[test]
    fn table_counts() {
        assert_eq!(gate_param_count(GateKind::Gc, 3, 3, 32, 32), 9216);
        assert_eq!(gate_param_count(GateKind::LwgcDs, 3, 3, 32, 32), 1312);
        assert_eq!(gate_param_count(GateKind::LwgcPw, 3, 3, 32, 32), 1024);
        assert_eq!(gate_param_count(GateKind::LwgcSc, 3, 3, 32, 32), 288);
        assert_eq!(gate_param_count(GateKind::LwgcPw, 3, 3, 1, 17), 17);
    }

    #[test]
    fn counts_match_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in GateKind::ALL {
            let l = layer(kind, 32, 32, 1, 1);
            let mut p = Params::new();
            l.init(&mut rng, &mut p);
            let allocated: usize = l.gate_shapes().iter().map(|(n, _)| p[n].len()).sum();
            assert_eq!(allocated, l.gate_param_count(), "{kind}");
        }
    }

    #[test]
    fn ordering_on_table_config() {
        let c = |k| gate_param_count(k, 3, 3, 32, 32);
        assert!(c(GateKind::LwgcSc) <= c(GateKind::LwgcPw));
        assert!(c(GateKind::LwgcPw) <= c(GateKind::LwgcDs));
        assert!(c(GateKind::LwgcDs) <= c(GateKind::Gc));
    }

    #[test]
    fn zero_gate_halves_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in GateKind::ALL {
            let l = layer(kind, 4, 6, 1, 1);
            let mut p = Params::new();
            l.init(&mut rng, &mut p);
            for (n, _) in l.gate_shapes() {
                p.get_mut(&n).unwrap().data_mut().fill(0.0);
            }
            let x = uniform(Shape::new(1, 4, 8, 8), -1.0, 1.0, &mut rng);
            let mut ex = Eager::new(&p);
            let out = l.forward(&mut ex, &x).unwrap();
            let wf = p[&l.feature_weight()].clone();
            let f = crate::conv::conv2d(&x, &wf, ConvParams::new(1, 1)).unwrap();
            let expect = f.map(|v| {
                0.5 * if v > 0.0 {
                    v
                } else {
                    ((v as f64).exp() - 1.0) as f32
                }
            });
            assert_eq!(out, expect, "{kind}");
        }
    }

    #[test]
    fn single_channel_gate_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layer(GateKind::LwgcSc, 32, 32, 1, 1);
        let mut p = Params::new();
        l.init(&mut rng, &mut p);
        let x = uniform(Shape::new(1, 32, 64, 64), -1.0, 1.0, &mut rng);
        let mut ex = Eager::new(&p);
        let g = l.gate(&mut ex, &x).unwrap();
        assert_eq!(g.shape(), Shape::new(1, 1, 64, 64));
        assert_eq!(
            l.forward(&mut ex, &x).unwrap().shape(),
            Shape::new(1, 32, 64, 64)
        );
    }

    #[test]
    fn depthwise_gate_equals_materialized_full_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, dilation) in [(1, 1), (2, 1), (1, 2)] {
            let ds = layer(GateKind::LwgcDs, 5, 7, stride, dilation);
            let gc = GatedConvLayer {
                kind: GateKind::Gc,
                ..ds.clone()
            };
            let mut p = Params::new();
            ds.init(&mut rng, &mut p);
            let dw = p["l.gate.dw"].clone();
            let pw = p["l.gate.pw"].clone();
            let full = Tensor::from_fn(Shape::new(7, 5, 3, 3), |co, ci, y, x| {
                pw.at(co, ci, 0, 0) * dw.at(ci, 0, y, x)
            });
            let mut q = p.clone();
            q.insert("l.gate.w".into(), full);
            let x = uniform(Shape::new(2, 5, 9, 9), -1.0, 1.0, &mut rng);
            let a = ds.forward(&mut Eager::new(&p), &x).unwrap();
            let b = gc.forward(&mut Eager::new(&q), &x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let l = layer(GateKind::Gc, 4, 4, 1, 1);
        let mut p = Params::new();
        l.init(&mut ChaCha8Rng::seed_from_u64(0), &mut p);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(matches!(
            l.forward(&mut Eager::new(&p), &x),
            Err(CraError::Shape(_))
        ));
    }

    #[test]
    fn gradients_for_all_kinds() {
        for r in check_gated_layers(11).unwrap() {
            assert!(r.passed(), "{} {:.3e}", r.name, r.max_rel_error);
        }
    }
}
