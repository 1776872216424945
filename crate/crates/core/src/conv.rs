//! Direct 2-D convolution with TensorFlow-style `same` zero padding.
//!
//! Weights are laid out `(c_out, c_in / groups, kh, kw)`. The kernels work on
//! bands of output rows unfolded into `f64` column buffers; every output is
//! accumulated in a fixed order, so results do not depend on the thread
//! count.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, dilation: usize) -> Self {
        ConvParams {
            stride,
            dilation,
            groups: 1,
        }
    }

    pub const fn grouped(stride: usize, dilation: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            dilation,
            groups,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(CraError::InvalidArgument(format!(
                "stride, dilation and groups must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Output length and leading pad for one spatial axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let span = (kernel - 1) * dilation + 1;
    let total = ((out - 1) * stride + span).saturating_sub(input);
    (out, total / 2)
}

/// Nominal multiply-accumulate count, padding taps included.
pub fn conv_macs(input: Shape, weight: Shape, p: ConvParams) -> u64 {
    let ho = input.h.div_ceil(p.stride.max(1));
    let wo = input.w.div_ceil(p.stride.max(1));
    (input.n * weight.n * ho * wo * weight.c * weight.h * weight.w) as u64
}

fn check_shapes(input: Shape, weight: Shape, p: ConvParams) -> Result<()> {
    p.validate()?;
    if !input.c.is_multiple_of(p.groups) || !weight.n.is_multiple_of(p.groups) {
        return Err(CraError::Shape(format!(
            "groups {} must divide in channels {} and out channels {}",
            p.groups, input.c, weight.n
        )));
    }
    if input.c / p.groups != weight.c {
        return Err(CraError::Shape(format!(
            "conv input has {} channels but weight {} expects {} per group ({} groups)",
            input.c, weight, weight.c, p.groups
        )));
    }
    Ok(())
}

/// Range of output columns `ox` whose input column `ox*s + off - pad` is inside `0..len`.
#[inline]
fn valid_range(
    out_len: usize,
    len: usize,
    stride: usize,
    offset: usize,
    pad: usize,
) -> (usize, usize) {
    // ix = ox*stride + offset - pad
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi_excl = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

thread_local! {
    static SCRATCH: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A per-thread scratch buffer of `len` values with stale contents; callers
/// overwrite it before reading. The storage goes back to the pool on drop.
struct Scratch {
    buf: Vec<f64>,
    len: usize,
}

fn take(len: usize) -> Scratch {
    let mut buf = SCRATCH.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    Scratch { buf, len }
}

impl std::ops::Deref for Scratch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf[..self.len]
    }
}

impl std::ops::DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf[..self.len]
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.buf);
        SCRATCH.with(|p| p.borrow_mut().push(buf));
    }
}

/// Spatial bookkeeping shared by the three kernels.
#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    d: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    pad_l: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, kh: usize, kw: usize, p: ConvParams) -> Self {
        let (ho, pad_t) = same_padding(h, kh, p.stride, p.dilation);
        let (wo, pad_l) = same_padding(w, kw, p.stride, p.dilation);
        Geometry {
            h,
            w,
            kh,
            kw,
            s: p.stride,
            d: p.dilation,
            ho,
            wo,
            pad_t,
            pad_l,
        }
    }

    /// Output row ranges sized so one column buffer stays near 2 MB.
    fn bands(&self, channels: usize) -> Vec<(usize, usize)> {
        const BAND_ELEMS: usize = 1 << 18;
        let per_row = channels * self.kh * self.kw * self.wo;
        let rows = (BAND_ELEMS / per_row.max(1)).clamp(1, self.ho.max(1));
        (0..self.ho)
            .step_by(rows)
            .map(|r| (r, (r + rows).min(self.ho)))
            .collect()
    }

    /// Input row read by output row `oy` through kernel row `ky`, if inside.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky * self.d) as isize - self.pad_t as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Fills `cols` (`channels * kh * kw` rows of `(r1 - r0) * wo` values) with
/// the taps seen by output rows `r0..r1`. `planes` holds the input channels
/// back to back.
fn im2col(
    planes: &[f32],
    channels: usize,
    g: &Geometry,
    (r0, r1): (usize, usize),
    cols: &mut [f64],
) {
    let bp = (r1 - r0) * g.wo;
    let mut k = 0;
    for c in 0..channels {
        let plane = &planes[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[k * bp..][..bp];
                k += 1;
                let (lo, hi) = valid_range(g.wo, g.w, g.s, kx * g.d, g.pad_l);
                for oy in r0..r1 {
                    let out = &mut dst[(oy - r0) * g.wo..][..g.wo];
                    let iy = match g.in_row(oy, ky) {
                        Some(iy) if lo < hi => iy,
                        _ => {
                            out.fill(0.0);
                            continue;
                        }
                    };
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let row = &plane[iy * g.w..][..g.w];
                    let ix0 = lo * g.s + kx * g.d - g.pad_l;
                    if g.s == 1 {
                        for (o, &v) in out[lo..hi].iter_mut().zip(&row[ix0..ix0 + (hi - lo)]) {
                            *o = v as f64;
                        }
                    } else {
                        for (j, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = row[ix0 + j * g.s] as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto `planes`; the adjoint of [`im2col`].
fn col2im(
    cols: &[f64],
    channels: usize,
    g: &Geometry,
    (r0, r1): (usize, usize),
    planes: &mut [f64],
) {
    let bp = (r1 - r0) * g.wo;
    let mut k = 0;
    for c in 0..channels {
        let plane = &mut planes[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[k * bp..][..bp];
                k += 1;
                let (lo, hi) = valid_range(g.wo, g.w, g.s, kx * g.d, g.pad_l);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.s + kx * g.d - g.pad_l;
                for oy in r0..r1 {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let vals = &src[(oy - r0) * g.wo..][lo..hi];
                    let row = &mut plane[iy * g.w..][..g.w];
                    if g.s == 1 {
                        for (o, &v) in row[ix0..ix0 + (hi - lo)].iter_mut().zip(vals) {
                            *o += v;
                        }
                    } else {
                        for (j, &v) in vals.iter().enumerate() {
                            row[ix0 + j * g.s] += v;
                        }
                    }
                }
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[j][p] = sum_k a[j][k] * b[k][p]` for `rows` rows of `a` with row
/// stride `lda`, against `kdim` rows of `b` of length `bp`. Every output is
/// accumulated in ascending `k` with separate multiplies and adds, so the
/// vectorized and scalar paths agree bit for bit.
fn gemm(a: &[f64], lda: usize, rows: usize, kdim: usize, b: &[f64], bp: usize, out: &mut [f64]) {
    // pack `a` as [row block][k][MR], zero-padding the last block
    let blocks = rows.div_ceil(MR);
    let mut packed = vec![0.0f64; blocks * kdim * MR];
    for j in 0..rows {
        let (jb, jr) = (j / MR, j % MR);
        for k in 0..kdim {
            packed[(jb * kdim + k) * MR + jr] = a[j * lda + k];
        }
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(&packed, rows, kdim, b, bp, out) };
            return;
        }
    }
    gemm_packed(&packed, rows, kdim, b, bp, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(
    packed: &[f64],
    rows: usize,
    kdim: usize,
    b: &[f64],
    bp: usize,
    out: &mut [f64],
) {
    gemm_packed(packed, rows, kdim, b, bp, out);
}

#[inline(always)]
fn gemm_packed(packed: &[f64], rows: usize, kdim: usize, b: &[f64], bp: usize, out: &mut [f64]) {
    for jb in 0..rows.div_ceil(MR) {
        let pa = &packed[jb * kdim * MR..][..kdim * MR];
        let nb = MR.min(rows - jb * MR);
        let mut p0 = 0;
        while p0 + NR <= bp {
            let mut acc = [[0.0f64; NR]; MR];
            for k in 0..kdim {
                let col: [f64; NR] = b[k * bp + p0..][..NR].try_into().expect("NR");
                let wk: [f64; MR] = pa[k * MR..][..MR].try_into().expect("MR");
                for j in 0..MR {
                    for t in 0..NR {
                        acc[j][t] += wk[j] * col[t];
                    }
                }
            }
            for (j, r) in acc.iter().enumerate().take(nb) {
                out[(jb * MR + j) * bp + p0..][..NR].copy_from_slice(r);
            }
            p0 += NR;
        }
        for p in p0..bp {
            let mut acc = [0.0f64; MR];
            for k in 0..kdim {
                let v = b[k * bp + p];
                for j in 0..MR {
                    acc[j] += pa[k * MR + j] * v;
                }
            }
            for (j, &v) in acc.iter().enumerate().take(nb) {
                out[(jb * MR + j) * bp + p] = v;
            }
        }
    }
}

/// Dot product with four fixed partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            s[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `out[j][k] = dot(a[j], b[k])` over rows of length `len`.
fn dots(a: &[f64], rows: usize, b: &[f64], kdim: usize, len: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { dots_avx2(a, rows, b, kdim, len, out) };
            return;
        }
    }
    dots_plain(a, rows, b, kdim, len, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dots_avx2(a: &[f64], rows: usize, b: &[f64], kdim: usize, len: usize, out: &mut [f64]) {
    dots_plain(a, rows, b, kdim, len, out);
}

/// Tiled over 2 rows of `a` and 4 rows of `b`; each lane sums exactly as
/// [`dot`] does, so edge tiles that fall back to it give the same bits.
#[inline(always)]
fn dots_plain(a: &[f64], rows: usize, b: &[f64], kdim: usize, len: usize, out: &mut [f64]) {
    const JR: usize = 2;
    const KR: usize = 4;
    let body = len / 4 * 4;
    for j in (0..rows).step_by(JR) {
        for k in (0..kdim).step_by(KR) {
            if j + JR > rows || k + KR > kdim {
                for t in j..(j + JR).min(rows) {
                    for u in k..(k + KR).min(kdim) {
                        out[t * kdim + u] = dot(&a[t * len..][..len], &b[u * len..][..len]);
                    }
                }
                continue;
            }
            let ar: [&[f64]; JR] = std::array::from_fn(|t| &a[(j + t) * len..][..len]);
            let br: [&[f64]; KR] = std::array::from_fn(|u| &b[(k + u) * len..][..len]);
            let mut acc = [[[0.0f64; 4]; KR]; JR];
            for p in (0..body).step_by(4) {
                let av: [[f64; 4]; JR] =
                    std::array::from_fn(|t| ar[t][p..p + 4].try_into().expect("4"));
                let bv: [[f64; 4]; KR] =
                    std::array::from_fn(|u| br[u][p..p + 4].try_into().expect("4"));
                for t in 0..JR {
                    for u in 0..KR {
                        for l in 0..4 {
                            acc[t][u][l] += av[t][l] * bv[u][l];
                        }
                    }
                }
            }
            for t in 0..JR {
                for u in 0..KR {
                    let s = &acc[t][u];
                    let tail: f64 = ar[t][body..]
                        .iter()
                        .zip(&br[u][body..])
                        .map(|(x, y)| x * y)
                        .sum();
                    out[(j + t) * kdim + k + u] = (s[0] + s[1]) + (s[2] + s[3]) + tail;
                }
            }
        }
    }
}

type Task = (usize, usize, (usize, usize));

/// `(sample, group, band)` triples in a fixed order.
fn band_tasks(n: usize, groups: usize, bands: &[(usize, usize)]) -> Vec<Task> {
    let mut out = Vec::with_capacity(n * groups * bands.len());
    for i in 0..n {
        for g in 0..groups {
            out.extend(bands.iter().map(|&b| (i, g, b)));
        }
    }
    out
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Copies output rows `r0..r1` of `rows` planes into a dense f64 band.
fn band_of(
    planes: &[f32],
    rows: usize,
    plane_len: usize,
    wo: usize,
    (r0, r1): (usize, usize),
) -> Scratch {
    let bp = (r1 - r0) * wo;
    let mut out = take(rows * bp);
    for j in 0..rows {
        for (o, &v) in out[j * bp..][..bp]
            .iter_mut()
            .zip(&planes[j * plane_len + r0 * wo..][..bp])
        {
            *o = v as f64;
        }
    }
    out
}

pub fn conv2d(x: &Tensor, w: &Tensor, p: ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    check_shapes(xs, ws, p)?;
    let g = Geometry::new(xs.h, xs.w, ws.h, ws.w, p);
    let out_shape = Shape::new(xs.n, ws.n, g.ho, g.wo);
    let cin_g = ws.c;
    let cout_g = ws.n / p.groups;
    let kdim = cin_g * ws.h * ws.w;
    let plane = g.ho * g.wo;
    let wd = to_f64(w.data());
    let xd = x.data();
    let bands = g.bands(cin_g);
    let tasks = band_tasks(xs.n, p.groups, &bands);
    let results: Vec<Vec<f32>> = tasks
        .par_iter()
        .map(|&(n, gr, band)| {
            let bp = (band.1 - band.0) * g.wo;
            let planes = &xd[(n * xs.c + gr * cin_g) * xs.h * xs.w..][..cin_g * xs.h * xs.w];
            let mut cols = take(kdim * bp);
            im2col(planes, cin_g, &g, band, &mut cols);
            let mut out = take(cout_g * bp);
            gemm(
                &wd[gr * cout_g * kdim..],
                kdim,
                cout_g,
                kdim,
                &cols,
                bp,
                &mut out,
            );
            let res = out.iter().map(|&v| v as f32).collect();
            res
        })
        .collect();
    let mut out = vec![0.0f32; out_shape.numel()];
    for (&(n, gr, (r0, r1)), res) in tasks.iter().zip(&results) {
        let bp = (r1 - r0) * g.wo;
        for j in 0..cout_g {
            let dst = &mut out[(n * ws.n + gr * cout_g + j) * plane + r0 * g.wo..][..bp];
            dst.copy_from_slice(&res[j * bp..(j + 1) * bp]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output gradient
/// of shape `(n, c_out, ho, wo)` back to `(n, c_in, in_h, in_w)`.
pub fn conv2d_input_grad(
    dy: &Tensor,
    w: &Tensor,
    p: ConvParams,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    p.validate()?;
    let ys = dy.shape();
    let ws = w.shape();
    let g = Geometry::new(in_h, in_w, ws.h, ws.w, p);
    if ys.c != ws.n || ys.h != g.ho || ys.w != g.wo || !ws.n.is_multiple_of(p.groups) {
        return Err(CraError::Shape(format!(
            "conv input-grad: dy {ys} incompatible with weight {ws} for input {in_h}x{in_w}"
        )));
    }
    let cin = ws.c * p.groups;
    let cin_g = ws.c;
    let cout_g = ws.n / p.groups;
    let kdim = cin_g * ws.h * ws.w;
    let plane = g.ho * g.wo;
    let out_shape = Shape::new(ys.n, cin, in_h, in_w);
    // weights transposed per group to (kdim, cout_g)
    let mut wt = vec![0.0f64; ws.numel()];
    for gr in 0..p.groups {
        for j in 0..cout_g {
            for k in 0..kdim {
                wt[gr * cout_g * kdim + k * cout_g + j] =
                    w.data()[(gr * cout_g + j) * kdim + k] as f64;
            }
        }
    }
    let yd = dy.data();
    let bands = g.bands(cin_g);
    let mut out = vec![0.0f32; out_shape.numel()];
    out.par_chunks_mut(cin_g * in_h * in_w)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, gr) = (idx / p.groups, idx % p.groups);
            let dyg = &yd[(n * ys.c + gr * cout_g) * plane..][..cout_g * plane];
            let mut acc = take(cin_g * in_h * in_w);
            acc.fill(0.0);
            for &band in &bands {
                let bp = (band.1 - band.0) * g.wo;
                let dyb = band_of(dyg, cout_g, plane, g.wo, band);
                let mut dcols = take(kdim * bp);
                gemm(
                    &wt[gr * cout_g * kdim..],
                    cout_g,
                    kdim,
                    cout_g,
                    &dyb,
                    bp,
                    &mut dcols,
                );
                col2im(&dcols, cin_g, &g, band, &mut acc);
            }
            for (o, a) in dst.iter_mut().zip(acc.iter()) {
                *o = *a as f32;
            }
        });
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(
    x: &Tensor,
    dy: &Tensor,
    p: ConvParams,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    p.validate()?;
    let xs = x.shape();
    let ys = dy.shape();
    let g = Geometry::new(xs.h, xs.w, kh, kw, p);
    if ys.n != xs.n || ys.h != g.ho || ys.w != g.wo || !xs.c.is_multiple_of(p.groups) || !ys.c.is_multiple_of(p.groups)
    {
        return Err(CraError::Shape(format!(
            "conv weight-grad: x {xs} and dy {ys} incompatible (kernel {kh}x{kw}, {p:?})"
        )));
    }
    let cin_g = xs.c / p.groups;
    let cout_g = ys.c / p.groups;
    let kdim = cin_g * kh * kw;
    let plane = g.ho * g.wo;
    let w_shape = Shape::new(ys.c, cin_g, kh, kw);
    let xd = x.data();
    let yd = dy.data();
    let bands = g.bands(cin_g);
    let tasks = band_tasks(xs.n, p.groups, &bands);
    let partials: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(n, gr, band)| {
            let bp = (band.1 - band.0) * g.wo;
            let planes = &xd[(n * xs.c + gr * cin_g) * xs.h * xs.w..][..cin_g * xs.h * xs.w];
            let mut cols = take(kdim * bp);
            im2col(planes, cin_g, &g, band, &mut cols);
            let dyb = band_of(
                &yd[(n * ys.c + gr * cout_g) * plane..],
                cout_g,
                plane,
                g.wo,
                band,
            );
            let mut part = vec![0.0f64; cout_g * kdim];
            dots(&dyb, cout_g, &cols, kdim, bp, &mut part);
            part
        })
        .collect();
    let mut acc = vec![0.0f64; w_shape.numel()];
    for (&(_, gr, _), part) in tasks.iter().zip(&partials) {
        for (a, &v) in acc[gr * cout_g * kdim..][..cout_g * kdim]
            .iter_mut()
            .zip(part)
        {
            *a += v;
        }
    }
    Tensor::from_vec(w_shape, acc.into_iter().map(|v| v as f32).collect())
}
