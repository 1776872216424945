//! Random free-form hole masks: brush strokes and transformed templates.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Brush,
    Template,
    /// Brush or template with equal probability.
    Mixed,
}

impl std::str::FromStr for MaskMode {
    type Err = CraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brush" => Ok(MaskMode::Brush),
            "template" => Ok(MaskMode::Template),
            "mixed" => Ok(MaskMode::Mixed),
            _ => Err(CraError::InvalidArgument(format!(
                "unknown mask mode `{s}`"
            ))),
        }
    }
}

/// Brush parameters. Widths are given for a 512-pixel image and scale with
/// the shorter side.
#[derive(Clone, Debug, PartialEq)]
pub struct BrushSpec {
    pub strokes: (usize, usize),
    pub vertices: (usize, usize),
    pub width: (f64, f64),
    /// Segment length as a fraction of the shorter side.
    pub length: (f64, f64),
    /// Maximum turn between consecutive segments, in degrees.
    pub angle_jitter: f64,
}

impl Default for BrushSpec {
    fn default() -> Self {
        BrushSpec {
            strokes: (1, 8),
            vertices: (4, 12),
            width: (5.0, 30.0),
            length: (0.04, 0.16),
            angle_jitter: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSpec {
    /// Rotation range in degrees.
    pub rotation: (f64, f64),
    pub allow_flip: bool,
    pub scale: (f64, f64),
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec {
            rotation: (-45.0, 45.0),
            allow_flip: true,
            scale: (0.5, 1.5),
        }
    }
}

impl TemplateSpec {
    pub fn identity() -> Self {
        TemplateSpec {
            rotation: (0.0, 0.0),
            allow_flip: false,
            scale: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub max_area_fraction: f64,
    pub brush: BrushSpec,
    pub template: TemplateSpec,
    /// Binary `(1, 1, h, w)` templates, any size.
    pub templates: Vec<Tensor>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            mode: MaskMode::Brush,
            max_area_fraction: 0.25,
            brush: BrushSpec::default(),
            template: TemplateSpec::default(),
            templates: Vec::new(),
        }
    }
}

fn range_f(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn range_u(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi.max(lo))
}

/// Running mask with a hole-pixel budget.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
    area: usize,
    budget: usize,
}

impl Canvas {
    /// Stamps a thick segment unless that would exceed the budget.
    /// Returns `false` once the budget is hit.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) -> bool {
        let (y0, y1) = (a.0.min(b.0) - radius, a.0.max(b.0) + radius);
        let (x0, x1) = (a.1.min(b.1) - radius, a.1.max(b.1) + radius);
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = dy * dy + dx * dx;
        let mut fresh = Vec::new();
        for y in clampi(y0, self.h)..=clampi(y1, self.h) {
            for x in clampi(x0, self.w)..=clampi(x1, self.w) {
                let i = y * self.w + x;
                if self.data[i] != 0.0 {
                    continue;
                }
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cy, cx) = (a.0 + t * dy - py, a.1 + t * dx - px);
                if cy * cy + cx * cx <= radius * radius {
                    fresh.push(i);
                }
            }
        }
        if self.area + fresh.len() > self.budget {
            return false;
        }
        self.area += fresh.len();
        for i in fresh {
            self.data[i] = 1.0;
        }
        true
    }
}

fn brush(h: usize, w: usize, spec: &BrushSpec, budget: usize, rng: &mut impl Rng) -> Vec<f32> {
    let side = h.min(w) as f64;
    let mut canvas = Canvas {
        h,
        w,
        data: vec![0.0; h * w],
        area: 0,
        budget,
    };
    let jitter = spec.angle_jitter.to_radians();
    'strokes: for _ in 0..range_u(rng, spec.strokes) {
        let mut p = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let mut angle = rng.gen_range(0.0..2.0 * PI);
        let radius = (range_f(rng, spec.width) * side / 512.0).max(1.0) / 2.0;
        for _ in 0..range_u(rng, spec.vertices) {
            angle += if jitter > 0.0 {
                rng.gen_range(-jitter..jitter)
            } else {
                0.0
            };
            let len = range_f(rng, spec.length) * side;
            let q = (
                (p.0 + len * angle.sin()).clamp(0.0, h as f64 - 1.0),
                (p.1 + len * angle.cos()).clamp(0.0, w as f64 - 1.0),
            );
            if !canvas.segment(p, q, radius) {
                break 'strokes;
            }
            p = q;
        }
    }
    canvas.data
}

fn template(
    h: usize,
    w: usize,
    tpl: &Tensor,
    spec: &TemplateSpec,
    budget: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let rot = range_f(rng, spec.rotation).to_radians();
    let flip = spec.allow_flip && rng.gen_bool(0.5);
    let scale = range_f(rng, spec.scale);
    let (th, tw) = (tpl.shape().h as f64, tpl.shape().w as f64);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (s, c) = rot.sin_cos();
    let mut data = vec![0.0; h * w];
    let mut area = 0;
    for y in 0..h {
        for x in 0..w {
            // inverse transform about the centre, then map the output frame
            // onto the template frame
            let (oy, ox) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let (ry, rx) = ((c * oy + s * ox) / scale, (-s * oy + c * ox) / scale);
            let rx = if flip { -rx } else { rx };
            let sy = (ry + cy) * th / h as f64;
            let sx = (rx + cx) * tw / w as f64;
            if sy < 0.0 || sx < 0.0 || sy >= th || sx >= tw {
                continue;
            }
            if tpl.at(0, 0, sy as usize, sx as usize) != 0.0 && area < budget {
                data[y * w + x] = 1.0;
                area += 1;
            }
        }
    }
    data
}

/// One binary `(1, 1, h, w)` mask with `1` marking the hole. The hole never
/// covers more than `max_area_fraction` of the pixels: brush strokes stop
/// before the segment that would cross the cap and templates are cut off in
/// raster order.
pub fn generate_mask(h: usize, w: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Result<Tensor> {
    if h < 64 || w < 64 {
        return Err(CraError::InvalidArgument(format!(
            "masks must be at least 64x64, got {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.max_area_fraction) {
        return Err(CraError::InvalidArgument(format!(
            "bad area cap {}",
            spec.max_area_fraction
        )));
    }
    let budget = (spec.max_area_fraction * (h * w) as f64).floor() as usize;
    let b = &spec.brush;
    if b.strokes.0 > b.strokes.1
        || b.vertices.0 > b.vertices.1
        || b.width.0 > b.width.1
        || b.width.0 <= 0.0
    {
        return Err(CraError::InvalidArgument(
            "brush ranges must be non-empty and widths positive".into(),
        ));
    }
    let min_radius = (b.width.0 * h.min(w) as f64 / 512.0).max(1.0) / 2.0;
    if PI * min_radius * min_radius > budget as f64 {
        return Err(CraError::InvalidArgument(format!(
            "thinnest brush stamp covers more than the {budget}-pixel area cap"
        )));
    }
    let use_template = match spec.mode {
        MaskMode::Brush => false,
        MaskMode::Template => true,
        MaskMode::Mixed => rng.gen_bool(0.5),
    };
    let data = if use_template {
        if spec.templates.is_empty() {
            return Err(CraError::InvalidArgument(
                "template masks requested but none loaded".into(),
            ));
        }
        let tpl = &spec.templates[rng.gen_range(0..spec.templates.len())];
        template(h, w, tpl, &spec.template, budget, rng)
    } else {
        brush(h, w, b, budget, rng)
    };
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

/// Loads every PNG in `dir` (sorted by name) as a template.
pub fn load_templates(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CraError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| crate::io::load_mask(p)).collect()
}
