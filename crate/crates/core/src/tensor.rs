//! Dense NCHW tensors of `f32`.

use std::fmt;

use crate::error::{CraError, Result};

/// Four-dimensional shape: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Shape { c, ..*self }
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Self {
        Shape { h, w, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Binary elementwise operator kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(CraError::Shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One `h*w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(CraError::NotScalar(self.shape.to_string()));
        }
        Ok(self.data[0])
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CraError::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    /// Elementwise `a op b`. `b` (or `a`) may have a single channel, in which
    /// case it is broadcast over the channels of the other operand.
    pub fn binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        let (a, b) = (self.shape, other.shape);
        if a == b {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| op.apply(x, y))
                .collect();
            return Ok(Tensor { shape: a, data });
        }
        let out_shape = broadcast_shape(a, b)?;
        let mut out = Tensor::zeros(out_shape);
        let plane = out_shape.plane();
        for n in 0..out_shape.n {
            for c in 0..out_shape.c {
                let pa = self.plane(n, if a.c == 1 { 0 } else { c });
                let pb = other.plane(n, if b.c == 1 { 0 } else { c });
                let dst = out.plane_mut(n, c);
                for i in 0..plane {
                    dst[i] = op.apply(pa[i], pb[i]);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn clip(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(CraError::InvalidArgument(format!(
                "clip bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(self.map(|v| v.clamp(lo, hi)))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Single batch item as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let s = self.shape;
        let len = s.c * s.plane();
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks `(1, c, h, w)` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| CraError::InvalidArgument("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.c != first.c || t.shape.h != first.h || t.shape.w != first.w {
                return Err(CraError::Shape(format!(
                    "stack: {} does not match {}",
                    t.shape, first
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }
}

pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let spatial_ok = a.n == b.n && a.h == b.h && a.w == b.w;
    if spatial_ok && (a.c == b.c || a.c == 1 || b.c == 1) {
        Ok(a.with_channels(a.c.max(b.c)))
    } else {
        Err(CraError::Shape(format!("cannot combine {a} with {b}")))
    }
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| CraError::InvalidArgument("concat of zero tensors".into()))?
        .shape;
    let mut channels = 0;
    for p in parts {
        let s = p.shape;
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(CraError::Shape(format!(
                "concat: {s} does not match spatial/batch dims of {first}"
            )));
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            let len = p.shape.c * p.shape.plane();
            data.extend_from_slice(&p.data[n * len..(n + 1) * len]);
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Channels `start..start + len`.
pub fn slice_channels(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape;
    if start + len > s.c {
        return Err(CraError::Shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&t.data[base..base + len * plane]);
    }
    Ok(Tensor {
        shape: s.with_channels(len),
        data,
    })
}

/// Places `t` at channel offset `start` inside a zero tensor with `total` channels.
pub fn pad_channels(t: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let s = t.shape;
    if start + s.c > total {
        return Err(CraError::Shape(format!(
            "cannot embed {} channels at offset {start} into {total}",
            s.c
        )));
    }
    let mut out = Tensor::zeros(s.with_channels(total));
    let plane = s.plane();
    for n in 0..s.n {
        let src = &t.data[n * s.c * plane..(n + 1) * s.c * plane];
        let base = (n * total + start) * plane;
        out.data[base..base + s.c * plane].copy_from_slice(src);
    }
    Ok(out)
}

/// Per-pixel switch: `mask != 0` takes `hole`, otherwise `keep`. The mask
/// has one channel and is broadcast. Values are copied, never recomputed.
pub fn select_by_mask(mask: &Tensor, hole: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let s = hole.shape;
    let m = mask.shape;
    if keep.shape != s || m.c != 1 || m.n != s.n || m.h != s.h || m.w != s.w {
        return Err(CraError::Shape(format!(
            "select: mask {m}, hole {s}, keep {}",
            keep.shape
        )));
    }
    let mut out = keep.clone();
    for n in 0..s.n {
        let mp = mask.plane(n, 0);
        for c in 0..s.c {
            let hp = hole.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..mp.len() {
                if mp[i] != 0.0 {
                    dst[i] = hp[i];
                }
            }
        }
    }
    Ok(out)
}

/// Extends the bottom and right edges to `h x w` by mirror reflection
/// (edge sample not repeated). Repeats the reflection for pads wider than
/// the input.
pub fn pad_reflect(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape;
    if h < s.h || w < s.w || s.h == 0 || s.w == 0 {
        return Err(CraError::Shape(format!(
            "cannot reflect-pad {s} to {h}x{w}"
        )));
    }
    let mirror = |i: usize, len: usize| {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let r = i % period;
        if r < len {
            r
        } else {
            period - r
        }
    };
    Ok(Tensor::from_fn(s.with_spatial(h, w), |n, c, y, x| {
        t.at(n, c, mirror(y, s.h), mirror(x, s.w))
    }))
}

/// The top-left `h x w` window.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape;
    if h > s.h || w > s.w {
        return Err(CraError::Shape(format!("cannot crop {s} to {h}x{w}")));
    }
    Ok(Tensor::from_fn(s.with_spatial(h, w), |n, c, y, x| {
        t.at(n, c, y, x)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&t, 2, 8).unwrap();
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[8..], &p.data()[..8]);
        assert_eq!(crop(&p, 1, 3).unwrap(), t);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn masked_image_with_empty_mask_is_identity() {
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| (c + y * 4 + x) as f32);
        let m = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let one_minus = m.map(|v| 1.0 - v);
        assert_eq!(x.mul(&one_minus).unwrap(), x);
    }

    #[test]
    fn clip_example() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-2.0, 0.3]).unwrap();
        assert_eq!(t.clip(-1.0, 1.0).unwrap().data(), &[-1.0, 0.3]);
        assert!(t.clip(1.0, 1.0).is_err());
    }

    #[test]
    fn concat_shapes_sum_channels() {
        let a = Tensor::zeros(Shape::new(1, 32, 5, 7));
        let b = Tensor::zeros(Shape::new(1, 64, 5, 7));
        assert_eq!(
            concat_channels(&[&a, &b]).unwrap().shape(),
            Shape::new(1, 96, 5, 7)
        );
        let c = Tensor::zeros(Shape::new(1, 64, 5, 6));
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, y, x| {
            (n * 100 + c * 10 + y * 3 + x) as f32
        });
        let b = a.scale(-1.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&cat, 2, 2).unwrap(), b);
        let padded = pad_channels(&b, 2, 4).unwrap();
        assert_eq!(slice_channels(&padded, 2, 2).unwrap(), b);
        assert!(slice_channels(&padded, 0, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_broadcast() {
        let x = Tensor::full(Shape::new(1, 3, 2, 2), 2.0);
        let m = Tensor::full(Shape::new(1, 1, 2, 2), 0.5);
        assert_eq!(
            x.mul(&m).unwrap(),
            Tensor::full(Shape::new(1, 3, 2, 2), 1.0)
        );
        assert_eq!(m.mul(&x).unwrap().shape(), Shape::new(1, 3, 2, 2));
        let bad = Tensor::full(Shape::new(1, 2, 2, 2), 0.5);
        assert!(x.mul(&bad).is_err());
    }

    #[test]
    fn select_copies_values() {
        let hole = Tensor::full(Shape::new(1, 3, 2, 2), 7.0);
        let keep = Tensor::full(Shape::new(1, 3, 2, 2), -1.0);
        let m = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = select_by_mask(&m, &hole, &keep).unwrap();
        assert_eq!(out.at(0, 2, 0, 0), 7.0);
        assert_eq!(out.at(0, 2, 0, 1), -1.0);
    }

    #[test]
    fn non_finite_detected() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(CraError::NonFinite(_))));
    }
}
