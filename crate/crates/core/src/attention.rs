//! Patch attention: hole/context partition, cosine-softmax scores on a
//! coarse feature grid, and score-weighted transfer of context patches into
//! hole patches at any resolution that tiles the same grid.
//!
//! Scores are stored densely as a `cells x cells` matrix where `cells =
//! grid * grid`. Row `i` is a context (source) cell, column `j` a hole
//! (target) cell. Columns of context cells and rows of hole cells are zero.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{CraError, Result};
use crate::tensor::{Shape, Tensor};

/// Side length of the attention grid at the default 512 network resolution.
pub const DEFAULT_GRID: usize = 32;
/// Patch side used to compute scores on the grid map.
pub const SCORE_PATCH: usize = 3;
/// Guard for cosine-similarity norms.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellPartition {
    grid: usize,
    hole: Vec<bool>,
}

impl CellPartition {
    pub fn from_cells(grid: usize, hole: Vec<bool>) -> Result<Self> {
        if grid == 0 || hole.len() != grid * grid {
            return Err(CraError::InvalidArgument(format!(
                "partition of grid {grid} needs {} cells, got {}",
                grid * grid,
                hole.len()
            )));
        }
        Ok(CellPartition { grid, hole })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.hole.len()
    }

    pub fn is_hole(&self, cell: usize) -> bool {
        self.hole[cell]
    }

    pub fn n_hole(&self) -> usize {
        self.hole.iter().filter(|&&h| h).count()
    }

    pub fn n_context(&self) -> usize {
        self.cells() - self.n_hole()
    }

    pub fn hole_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&i| self.hole[i]).collect()
    }

    pub fn context_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&i| !self.hole[i]).collect()
    }
}

/// Classifies every cell of a `grid x grid` partition of a single-channel
/// binary mask. A cell is a hole as soon as any of its pixels is a hole.
pub fn partition_cells(mask: &Tensor, grid: usize) -> Result<CellPartition> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 {
        return Err(CraError::Shape(format!(
            "partition expects a (1, 1, h, w) mask, got {s}"
        )));
    }
    if grid == 0 || !s.h.is_multiple_of(grid) || !s.w.is_multiple_of(grid) {
        return Err(CraError::Dimension(format!(
            "mask {}x{} is not divisible into a {grid}x{grid} grid",
            s.h, s.w
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CraError::InvalidArgument(
            "mask must be binary (0 or 1)".into(),
        ));
    }
    let (ch, cw) = (s.h / grid, s.w / grid);
    let plane = mask.plane(0, 0);
    let mut hole = vec![false; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut sum = 0.0f64;
            for y in gy * ch..(gy + 1) * ch {
                sum += plane[y * s.w + gx * cw..y * s.w + (gx + 1) * cw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            hole[gy * grid + gx] = sum / (ch * cw) as f64 > 0.0;
        }
    }
    let partition = CellPartition { grid, hole };
    if partition.n_context() == 0 {
        return Err(CraError::EmptyContext);
    }
    Ok(partition)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a sliding-window patch grid over a `map` of size `(h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGridSpec {
    pub map: (usize, usize),
    pub patch: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl PatchGridSpec {
    /// Non-overlapping tiling: stride equals patch.
    pub fn tiling(map: (usize, usize), patch: (usize, usize)) -> Self {
        PatchGridSpec {
            map,
            patch,
            stride: patch,
            padding: Padding::Valid,
        }
    }

    fn axis(len: usize, patch: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
        if patch == 0 || stride == 0 {
            return Err(CraError::InvalidArgument(
                "patch and stride must be positive".into(),
            ));
        }
        match padding {
            Padding::Same => {
                let count = len.div_ceil(stride);
                let total = ((count - 1) * stride + patch).saturating_sub(len);
                Ok((count, total / 2))
            }
            Padding::Valid => {
                if patch > len {
                    return Err(CraError::Shape(format!(
                        "patch {patch} larger than map {len}"
                    )));
                }
                Ok(((len - patch) / stride + 1, 0))
            }
        }
    }

    /// `(rows, cols, pad_top, pad_left)` of the patch grid.
    pub fn layout(&self) -> Result<(usize, usize, usize, usize)> {
        let (rows, pt) = Self::axis(self.map.0, self.patch.0, self.stride.0, self.padding)?;
        let (cols, pl) = Self::axis(self.map.1, self.patch.1, self.stride.1, self.padding)?;
        Ok((rows, cols, pt, pl))
    }

    pub fn count(&self) -> Result<usize> {
        let (r, c, _, _) = self.layout()?;
        Ok(r * c)
    }
}

/// Patches of one map, each flattened channel-major to `c * ph * pw` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub spec: PatchGridSpec,
    pub channels: usize,
    pub patches: Vec<Vec<f32>>,
}

pub fn extract_patches(map: &Tensor, spec: PatchGridSpec) -> Result<PatchStack> {
    let s = map.shape();
    if s.n != 1 || (s.h, s.w) != spec.map {
        return Err(CraError::Shape(format!(
            "patch spec for {:?} applied to map {s}",
            spec.map
        )));
    }
    let (rows, cols, pt, pl) = spec.layout()?;
    let (ph, pw) = spec.patch;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut v = Vec::with_capacity(s.c * ph * pw);
            for c in 0..s.c {
                let plane = map.plane(0, c);
                for dy in 0..ph {
                    let y = (r * spec.stride.0 + dy) as isize - pt as isize;
                    for dx in 0..pw {
                        let x = (q * spec.stride.1 + dx) as isize - pl as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < s.h && (x as usize) < s.w;
                        v.push(if inside {
                            plane[y as usize * s.w + x as usize]
                        } else {
                            0.0
                        });
                    }
                }
            }
            patches.push(v);
        }
    }
    Ok(PatchStack {
        spec,
        channels: s.c,
        patches,
    })
}

/// Inverse of [`extract_patches`]: overlapping contributions are averaged,
/// so a non-overlapping tiling reproduces the map exactly.
pub fn fold_patches(stack: &PatchStack) -> Result<Tensor> {
    let spec = stack.spec;
    let (rows, cols, pt, pl) = spec.layout()?;
    let (ph, pw) = spec.patch;
    let (h, w) = spec.map;
    if stack.patches.len() != rows * cols
        || stack
            .patches
            .iter()
            .any(|p| p.len() != stack.channels * ph * pw)
    {
        return Err(CraError::Shape(
            "patch stack does not match its spec".into(),
        ));
    }
    let mut sum = vec![0.0f64; stack.channels * h * w];
    let mut count = vec![0u32; h * w];
    for r in 0..rows {
        for q in 0..cols {
            let patch = &stack.patches[r * cols + q];
            for dy in 0..ph {
                let y = (r * spec.stride.0 + dy) as isize - pt as isize;
                if y < 0 || y as usize >= h {
                    continue;
                }
                for dx in 0..pw {
                    let x = (q * spec.stride.1 + dx) as isize - pl as isize;
                    if x < 0 || x as usize >= w {
                        continue;
                    }
                    let pix = y as usize * w + x as usize;
                    count[pix] += 1;
                    for c in 0..stack.channels {
                        sum[c * h * w + pix] += patch[(c * ph + dy) * pw + dx] as f64;
                    }
                }
            }
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = count[i % (h * w)];
            if n == 0 {
                0.0
            } else {
                (v / n as f64) as f32
            }
        })
        .collect();
    Tensor::from_vec(Shape::new(1, stack.channels, h, w), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    matrix: Vec<f32>,
    partition: CellPartition,
}

impl AttentionScores {
    /// Builds scores from an explicit dense matrix, validating the
    /// normalization invariants.
    pub fn from_matrix(partition: CellPartition, matrix: Vec<f32>) -> Result<Self> {
        let cells = partition.cells();
        if matrix.len() != cells * cells {
            return Err(CraError::Shape(format!(
                "score matrix needs {cells}x{cells} entries, got {}",
                matrix.len()
            )));
        }
        let scores = AttentionScores { matrix, partition };
        scores.check_normalized(1e-5)?;
        Ok(scores)
    }

    pub fn grid(&self) -> usize {
        self.partition.grid
    }

    pub fn cells(&self) -> usize {
        self.partition.cells()
    }

    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    /// Score of context row `i` for hole column `j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.matrix[i * self.cells() + j]
    }

    /// Verifies that every hole column sums to one over context rows, that
    /// hole rows are zero and that every entry lies in `[0, 1]`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let cells = self.cells();
        if self.matrix.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CraError::InvalidArgument("score outside [0, 1]".into()));
        }
        for j in self.partition.hole_cells() {
            let mut sum = 0.0f64;
            for i in 0..cells {
                let v = self.get(i, j) as f64;
                if self.partition.is_hole(i) {
                    if v != 0.0 {
                        return Err(CraError::InvalidArgument(format!(
                            "hole row {i} has non-zero score in column {j}"
                        )));
                    }
                } else {
                    sum += v;
                }
            }
            if (sum - 1.0).abs() > tol {
                return Err(CraError::InvalidArgument(format!(
                    "hole column {j} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    fn tile_of(&self, map: Shape) -> Result<(usize, usize)> {
        let g = self.grid();
        if !map.h.is_multiple_of(g) || !map.w.is_multiple_of(g) || map.h == 0 || map.w == 0 {
            return Err(CraError::Dimension(format!(
                "map {}x{} does not tile the {g}x{g} attention grid",
                map.h, map.w
            )));
        }
        Ok((map.h / g, map.w / g))
    }

    /// Replaces every hole patch of a `(1, c, h, w)` map by the score-weighted
    /// sum of context patches. Patches tile the map exactly. Context patches
    /// are copied unchanged, or zeroed when `keep_context` is false.
    pub fn transfer_map(&self, map: &Tensor, keep_context: bool) -> Result<Tensor> {
        let s = map.shape();
        if s.n != 1 {
            return Err(CraError::Shape(format!(
                "transfer expects batch 1, got {s}"
            )));
        }
        let (ph, pw) = self.tile_of(s)?;
        let g = self.grid();
        let holes = self.partition.hole_cells();
        let contexts = self.partition.context_cells();
        let src = map.data();
        let filled: Vec<Vec<f32>> = holes
            .par_iter()
            .map(|&j| {
                let mut acc = vec![0.0f64; s.c * ph * pw];
                for &i in &contexts {
                    let wgt = self.get(i, j) as f64;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (y0, x0) = ((i / g) * ph, (i % g) * pw);
                    for c in 0..s.c {
                        for dy in 0..ph {
                            let row = &src[((c * s.h) + y0 + dy) * s.w + x0..][..pw];
                            let dst = &mut acc[(c * ph + dy) * pw..][..pw];
                            for (a, &v) in dst.iter_mut().zip(row) {
                                *a += wgt * v as f64;
                            }
                        }
                    }
                }
                acc.into_iter().map(|v| v as f32).collect()
            })
            .collect();
        let mut out = if keep_context {
            map.clone()
        } else {
            Tensor::zeros(s)
        };
        let dst = out.data_mut();
        for (&j, patch) in holes.iter().zip(&filled) {
            let (y0, x0) = ((j / g) * ph, (j % g) * pw);
            for c in 0..s.c {
                for dy in 0..ph {
                    let start = ((c * s.h) + y0 + dy) * s.w + x0;
                    dst[start..start + pw].copy_from_slice(&patch[(c * ph + dy) * pw..][..pw]);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`AttentionScores::transfer_map`] with `keep_context = true`.
    pub fn transfer_map_adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        let s = grad.shape();
        if s.n != 1 {
            return Err(CraError::Shape(format!(
                "transfer expects batch 1, got {s}"
            )));
        }
        let (ph, pw) = self.tile_of(s)?;
        let g = self.grid();
        let holes = self.partition.hole_cells();
        let contexts = self.partition.context_cells();
        let src = grad.data();
        let gathered: Vec<Vec<f32>> = contexts
            .par_iter()
            .map(|&i| {
                let (y0, x0) = ((i / g) * ph, (i % g) * pw);
                let mut acc = vec![0.0f64; s.c * ph * pw];
                for c in 0..s.c {
                    for dy in 0..ph {
                        let row = &src[((c * s.h) + y0 + dy) * s.w + x0..][..pw];
                        for (a, &v) in acc[(c * ph + dy) * pw..][..pw].iter_mut().zip(row) {
                            *a = v as f64;
                        }
                    }
                }
                for &j in &holes {
                    let wgt = self.get(i, j) as f64;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (hy, hx) = ((j / g) * ph, (j % g) * pw);
                    for c in 0..s.c {
                        for dy in 0..ph {
                            let row = &src[((c * s.h) + hy + dy) * s.w + hx..][..pw];
                            for (a, &v) in acc[(c * ph + dy) * pw..][..pw].iter_mut().zip(row) {
                                *a += wgt * v as f64;
                            }
                        }
                    }
                }
                acc.into_iter().map(|v| v as f32).collect()
            })
            .collect();
        let mut out = Tensor::zeros(s);
        let dst = out.data_mut();
        for (&i, patch) in contexts.iter().zip(&gathered) {
            let (y0, x0) = ((i / g) * ph, (i % g) * pw);
            for c in 0..s.c {
                for dy in 0..ph {
                    let start = ((c * s.h) + y0 + dy) * s.w + x0;
                    dst[start..start + pw].copy_from_slice(&patch[(c * ph + dy) * pw..][..pw]);
                }
            }
        }
        Ok(out)
    }

    /// Writes the matrix as raw little-endian `f32` rows to `path` and a
    /// plain-text description next to it (`<path>.txt`).
    pub fn write_dump(&self, path: &Path) -> Result<PathBuf> {
        let file = File::create(path).map_err(|e| CraError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for v in &self.matrix {
            out.write_all(&v.to_le_bytes())
                .map_err(|e| CraError::io(path, e))?;
        }
        out.flush().map_err(|e| CraError::io(path, e))?;

        let mut header_path = path.as_os_str().to_owned();
        header_path.push(".txt");
        let header_path = PathBuf::from(header_path);
        let holes: Vec<String> = self
            .partition
            .hole_cells()
            .iter()
            .map(|c| c.to_string())
            .collect();
        let header = format!(
            "dtype f32le\nlayout row-major\nrows {cells}\ncols {cells}\ngrid {grid}\n\
             rows_are context\ncols_are hole\nn_context {nc}\nn_hole {nh}\nhole_cells {holes}\n",
            cells = self.cells(),
            grid = self.grid(),
            nc = self.partition.n_context(),
            nh = self.partition.n_hole(),
            holes = holes.join(","),
        );
        std::fs::write(&header_path, header).map_err(|e| CraError::io(&header_path, e))?;
        Ok(header_path)
    }
}

/// Cosine-similarity + softmax scores between every hole cell and every
/// context cell of a `(1, c, grid, grid)` feature map, using `patch x patch`
/// windows (stride 1, zero `same` padding) around each cell.
pub fn compute_scores_with_patch(
    map: &Tensor,
    partition: &CellPartition,
    patch: usize,
) -> Result<AttentionScores> {
    let s = map.shape();
    let g = partition.grid();
    if s.n != 1 || s.h != g || s.w != g {
        return Err(CraError::Shape(format!(
            "score map must be (1, c, {g}, {g}), got {s}"
        )));
    }
    if partition.n_context() == 0 {
        return Err(CraError::EmptyContext);
    }
    let spec = PatchGridSpec {
        map: (g, g),
        patch: (patch, patch),
        stride: (1, 1),
        padding: Padding::Same,
    };
    let stack = extract_patches(map, spec)?;
    let normalized: Vec<Vec<f64>> = stack
        .patches
        .iter()
        .map(|p| {
            let norm = p.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            p.iter().map(|&v| v as f64 / denom).collect()
        })
        .collect();

    let cells = g * g;
    let holes = partition.hole_cells();
    let contexts = partition.context_cells();
    let columns: Vec<Vec<f32>> = holes
        .par_iter()
        .map(|&j| {
            let pj = &normalized[j];
            let cos: Vec<f64> = contexts
                .iter()
                .map(|&i| normalized[i].iter().zip(pj).map(|(a, b)| a * b).sum())
                .collect();
            let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = cos.iter().map(|c| (c - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| (e / total) as f32).collect()
        })
        .collect();
    let mut matrix = vec![0.0f32; cells * cells];
    for (&j, col) in holes.iter().zip(&columns) {
        for (&i, &v) in contexts.iter().zip(col) {
            matrix[i * cells + j] = v;
        }
    }
    Ok(AttentionScores {
        matrix,
        partition: partition.clone(),
    })
}

/// Scores with the default 3x3 patch windows.
pub fn compute_scores(map: &Tensor, partition: &CellPartition) -> Result<AttentionScores> {
    compute_scores_with_patch(map, partition, SCORE_PATCH)
}

/// Fills hole patches of a feature map `P^l` whose side is
/// `grid * level_patch`.
pub fn attention_transfer(
    map: &Tensor,
    scores: &AttentionScores,
    level_patch: usize,
) -> Result<Tensor> {
    let g = scores.grid();
    let s = map.shape();
    if s.h != g * level_patch || s.w != g * level_patch {
        return Err(CraError::Dimension(format!(
            "feature map {}x{} is not {g}x{g} patches of size {level_patch}",
            s.h, s.w
        )));
    }
    scores.transfer_map(map, true)
}

/// Aggregates contextual residual patches into the hole patches of a
/// full-resolution residual image. Context patches of the result are zero.
pub fn aggregate_residuals(residual: &Tensor, scores: &AttentionScores) -> Result<Tensor> {
    scores.transfer_map(residual, false)
}
