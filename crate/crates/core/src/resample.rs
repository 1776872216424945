//! Integer-factor down/up-sampling and the contextual residual.
//!
//! Interpolating methods use the half-pixel (align-corners = false)
//! convention with clamp-to-edge sampling. Work is separable and carried out
//! in `f64`, rounding to `f32` once per output value, so constant images stay
//! exactly constant.

use std::fmt;
use std::str::FromStr;

use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownMethod {
    Averaging,
    Nearest,
    Bilinear,
    Bicubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpMethod {
    Nearest,
    Bilinear,
    Bicubic,
}

impl DownMethod {
    pub const ALL: [DownMethod; 4] = [
        DownMethod::Averaging,
        DownMethod::Nearest,
        DownMethod::Bilinear,
        DownMethod::Bicubic,
    ];
}

impl UpMethod {
    pub const ALL: [UpMethod; 3] = [UpMethod::Nearest, UpMethod::Bilinear, UpMethod::Bicubic];
}

impl fmt::Display for DownMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DownMethod::Averaging => "avg",
            DownMethod::Nearest => "nearest",
            DownMethod::Bilinear => "bilinear",
            DownMethod::Bicubic => "bicubic",
        })
    }
}

impl fmt::Display for UpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpMethod::Nearest => "nearest",
            UpMethod::Bilinear => "bilinear",
            UpMethod::Bicubic => "bicubic",
        })
    }
}

impl FromStr for DownMethod {
    type Err = CraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "averaging" => Ok(DownMethod::Averaging),
            "nearest" => Ok(DownMethod::Nearest),
            "bilinear" => Ok(DownMethod::Bilinear),
            "bicubic" => Ok(DownMethod::Bicubic),
            other => Err(CraError::InvalidArgument(format!(
                "unknown down-sampling method `{other}`"
            ))),
        }
    }
}

impl FromStr for UpMethod {
    type Err = CraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpMethod::Nearest),
            "bilinear" => Ok(UpMethod::Bilinear),
            "bicubic" => Ok(UpMethod::Bicubic),
            other => Err(CraError::InvalidArgument(format!(
                "unknown up-sampling method `{other}`"
            ))),
        }
    }
}

/// The down/up pair used around the generator. Both up-sampling stages of
/// one pipeline run share `up`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MethodPair {
    pub down: DownMethod,
    pub up: UpMethod,
}

impl Default for MethodPair {
    fn default() -> Self {
        MethodPair {
            down: DownMethod::Averaging,
            up: UpMethod::Bilinear,
        }
    }
}

impl fmt::Display for MethodPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.down, self.up)
    }
}

/// Per-axis integer factors `(fy, fx)`.
pub type Factors = (usize, usize);

#[derive(Clone, Copy)]
enum Kernel {
    Nearest,
    Linear,
    Cubic,
}

/// Catmull-Rom (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// For each output index, the `(source index, weight)` taps along one axis.
fn axis_taps(in_len: usize, out_len: usize, kernel: Kernel) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            match kernel {
                Kernel::Nearest => {
                    // Replication for up-sampling; block centre for down-sampling.
                    let i = if out_len >= in_len {
                        (o * in_len) / out_len
                    } else {
                        clamp((src + 0.5).floor() as isize)
                    };
                    vec![(i, 1.0)]
                }
                Kernel::Linear => {
                    let base = src.floor();
                    let t = src - base;
                    let b = base as isize;
                    if t == 0.0 {
                        vec![(clamp(b), 1.0)]
                    } else {
                        vec![(clamp(b), 1.0 - t), (clamp(b + 1), t)]
                    }
                }
                Kernel::Cubic => {
                    let base = src.floor();
                    let t = src - base;
                    let b = base as isize;
                    if t == 0.0 {
                        vec![(clamp(b), 1.0)]
                    } else {
                        (-1..=2)
                            .map(|k| (clamp(b + k), cubic_weight(t - k as f64)))
                            .collect()
                    }
                }
            }
        })
        .collect()
}

fn box_taps(in_len: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let w = 1.0 / factor as f64;
    (0..in_len / factor)
        .map(|o| (o * factor..(o + 1) * factor).map(|i| (i, w)).collect())
        .collect()
}

fn separable(img: &Tensor, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>]) -> Tensor {
    let s = img.shape();
    let (oh, ow) = (rows.len(), cols.len());
    let out_shape = s.with_spatial(oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut tmp = vec![0.0f64; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                for (x, taps) in cols.iter().enumerate() {
                    tmp[y * ow + x] = taps.iter().map(|&(i, wt)| wt * row[i] as f64).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..ow {
                    let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * ow + x]).sum();
                    dst[y * ow + x] = v as f32;
                }
            }
        }
    }
    out
}

pub fn downsample(img: &Tensor, factors: Factors, method: DownMethod) -> Result<Tensor> {
    let s = img.shape();
    let (fy, fx) = factors;
    if fy == 0 || fx == 0 {
        return Err(CraError::InvalidArgument(
            "down-sampling factor must be >= 1".into(),
        ));
    }
    if !s.h.is_multiple_of(fy) || !s.w.is_multiple_of(fx) {
        return Err(CraError::Dimension(format!(
            "{}x{} is not divisible by factors {fy}x{fx}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / fy, s.w / fx);
    let (rows, cols) = match method {
        DownMethod::Averaging => (box_taps(s.h, fy), box_taps(s.w, fx)),
        DownMethod::Nearest => (
            axis_taps(s.h, oh, Kernel::Nearest),
            axis_taps(s.w, ow, Kernel::Nearest),
        ),
        DownMethod::Bilinear => (
            axis_taps(s.h, oh, Kernel::Linear),
            axis_taps(s.w, ow, Kernel::Linear),
        ),
        DownMethod::Bicubic => (
            axis_taps(s.h, oh, Kernel::Cubic),
            axis_taps(s.w, ow, Kernel::Cubic),
        ),
    };
    Ok(separable(img, &rows, &cols))
}

pub fn upsample(img: &Tensor, factors: Factors, method: UpMethod) -> Result<Tensor> {
    let s = img.shape();
    let (fy, fx) = factors;
    if fy == 0 || fx == 0 {
        return Err(CraError::InvalidArgument(
            "up-sampling factor must be >= 1".into(),
        ));
    }
    if (fy, fx) == (1, 1) {
        return Ok(img.clone());
    }
    let kernel = match method {
        UpMethod::Nearest => Kernel::Nearest,
        UpMethod::Bilinear => Kernel::Linear,
        UpMethod::Bicubic => Kernel::Cubic,
    };
    let rows = axis_taps(s.h, s.h * fy, kernel);
    let cols = axis_taps(s.w, s.w * fx, kernel);
    Ok(separable(img, &rows, &cols))
}

/// Spacing of the pixel-value lattice (2^-23). Images in `[-1, 1]` whose
/// values are multiples of this step decompose exactly into a
/// low-frequency part and a residual in `f32`.
pub const LATTICE_STEP: f64 = 1.0 / 8_388_608.0;

/// Rounds to the nearest lattice point, clamped to `[-1, 1]`.
#[inline]
pub fn snap_to_lattice(v: f64) -> f32 {
    ((v.clamp(-1.0, 1.0) / LATTICE_STEP).round() * LATTICE_STEP) as f32
}

/// The blurry image `up(down(raw))`, clamped to `[-1, 1]` and snapped to the
/// pixel lattice.
pub fn low_frequency(raw: &Tensor, factors: Factors, pair: MethodPair) -> Result<Tensor> {
    let down = downsample(raw, factors, pair.down)?;
    let up = upsample(&down, factors, pair.up)?;
    Ok(up.map(|v| snap_to_lattice(v as f64)))
}

fn check_pipeline_dims(s: Shape, unit: usize) -> Result<()> {
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(unit) || !s.w.is_multiple_of(unit) {
        return Err(CraError::Dimension(format!(
            "image {}x{} must have height and width that are multiples of {unit}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// High-frequency residual `raw - low_frequency(raw)` at factors that bring
/// the image down to `net_size`. Height and width must be multiples of
/// `net_size`.
pub fn contextual_residual(raw: &Tensor, net_size: usize, pair: MethodPair) -> Result<Tensor> {
    let s = raw.shape();
    check_pipeline_dims(s, net_size)?;
    let factors = (s.h / net_size, s.w / net_size);
    let blurry = low_frequency(raw, factors, pair)?;
    raw.sub(&blurry)
}

/// Same as [`contextual_residual`] but also returns the blurry image.
pub fn decompose(raw: &Tensor, net_size: usize, pair: MethodPair) -> Result<(Tensor, Tensor)> {
    let s = raw.shape();
    check_pipeline_dims(s, net_size)?;
    let factors = (s.h / net_size, s.w / net_size);
    let blurry = low_frequency(raw, factors, pair)?;
    let residual = raw.sub(&blurry)?;
    Ok((blurry, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| f(y, x))
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::full(Shape::new(1, 3, 12, 12), 0.37);
        for m in DownMethod::ALL {
            for f in [1, 2, 3] {
                assert_eq!(
                    downsample(&t, (f, f), m).unwrap(),
                    Tensor::full(Shape::new(1, 3, 12 / f, 12 / f), 0.37)
                );
            }
        }
        for m in UpMethod::ALL {
            for f in [1, 2, 3, 8] {
                assert_eq!(
                    upsample(&t, (f, f), m).unwrap(),
                    Tensor::full(Shape::new(1, 3, 12 * f, 12 * f), 0.37)
                );
            }
        }
    }

    #[test]
    fn averaging_block_mean() {
        let t = img(2, 2, |y, x| [1.0, 3.0, 5.0, 7.0][y * 2 + x]);
        assert_eq!(
            downsample(&t, (2, 2), DownMethod::Averaging)
                .unwrap()
                .data(),
            &[4.0]
        );
    }

    #[test]
    fn averaging_preserves_mean() {
        let t = img(16, 24, |y, x| ((y * 31 + x * 17) % 13) as f32 * 0.1 - 0.6);
        let d = downsample(&t, (4, 8), DownMethod::Averaging).unwrap();
        assert!((t.mean_f64() - d.mean_f64()).abs() < 1e-7);
    }

    #[test]
    fn generator_input_size() {
        let t = Tensor::zeros(Shape::new(1, 1, 4096, 4096));
        let d = downsample(&t, (8, 8), DownMethod::Averaging).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 1, 512, 512));
    }

    #[test]
    fn rejects_non_divisible() {
        let t = Tensor::zeros(Shape::new(1, 1, 10, 10));
        assert!(matches!(
            downsample(&t, (3, 3), DownMethod::Averaging),
            Err(CraError::Dimension(_))
        ));
        assert!(contextual_residual(
            &Tensor::zeros(Shape::new(1, 3, 500, 512)),
            512,
            MethodPair::default()
        )
        .is_err());
    }

    #[test]
    fn identity_at_factor_one() {
        let t = img(5, 7, |y, x| (y * 7 + x) as f32 / 35.0);
        for m in UpMethod::ALL {
            assert_eq!(upsample(&t, (1, 1), m).unwrap(), t);
        }
        for m in DownMethod::ALL {
            assert_eq!(downsample(&t, (1, 1), m).unwrap(), t);
        }
    }

    #[test]
    fn nearest_replicates() {
        let t = img(2, 2, |y, x| [1.0, 2.0, 3.0, 4.0][y * 2 + x]);
        let u = upsample(&t, (2, 2), UpMethod::Nearest).unwrap();
        assert_eq!(
            u.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_half_pixel_weights() {
        let t = img(1, 2, |_, x| [0.0, 1.0][x]);
        let u = upsample(&t, (1, 2), UpMethod::Bilinear).unwrap();
        // sources at -0.25, 0.25, 0.75, 1.25 with edge clamping
        assert_eq!(u.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn ramp_residual_vanishes_in_interior() {
        // a*y + b*x sampled on the lattice
        let ramp = Tensor::from_fn(Shape::new(1, 3, 1024, 1024), |_, c, y, x| {
            snap_to_lattice(-0.9 + (y as f64 + 0.5 * x as f64) / 1600.0 + c as f64 * 0.01)
        });
        let r = contextual_residual(&ramp, 512, MethodPair::default()).unwrap();
        let mut max = 0.0f32;
        for c in 0..3 {
            for y in 2..1022 {
                for x in 2..1022 {
                    max = max.max(r.at(0, c, y, x).abs());
                }
            }
        }
        assert!(max < 1e-6, "interior residual {max}");
        // borders clamp, so some energy remains there
        assert!(r.at(0, 0, 0, 0).abs() > 0.0);
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2).map(|k| cubic_weight(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn lattice_image(h: usize, w: usize, vals: &[i32]) -> Tensor {
        let mut i = 0;
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| {
            i += 1;
            (vals[i % vals.len()] as f64 * LATTICE_STEP) as f32
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn residual_plus_blurry_is_raw(
            vals in proptest::collection::vec(-8_388_608i32..=8_388_608, 1..64),
            down in 0usize..4, up in 0usize..3,
        ) {
            let pair = MethodPair { down: DownMethod::ALL[down], up: UpMethod::ALL[up] };
            let raw = lattice_image(64, 32, &vals);
            let (blurry, residual) = decompose(&raw, 16, pair).unwrap();
            prop_assert_eq!(residual.add(&blurry).unwrap(), raw);
        }
    }
}
