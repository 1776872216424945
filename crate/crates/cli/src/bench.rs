use std::fmt::Write as _;
use std::time::Instant;

use cra_core::generator::{inpaint_pipeline, InpaintModel};
use cra_core::resample::MethodPair;
use cra_core::training::Dataset;
use cra_core::{CraError, Result, Shape, Tensor};

use crate::args::BenchArgs;
use crate::model::{self, Model};

pub const HEADER: &str =
    "size,height,width,conv_macs,resample_ops,aggregation_ops,peak_bytes_estimate,wall_ms,status";

/// f32 planes of full-resolution data alive at the pipeline's peak (image,
/// mask, up-sampled prediction, residual and its low-pass, aggregate and
/// output) plus headroom for the f64 resampling passes.
const FULL_RES_PLANES: u64 = 24;

/// Activation floats per network pixel held by the generator at its widest
/// point, a loose upper bound at full width.
const NET_PLANES: u64 = 256;

fn peak_estimate(size: usize, model: &Model) -> u64 {
    let net = model.net_size() as u64;
    let px = (size * size) as u64;
    4 * (FULL_RES_PLANES * px + NET_PLANES * net * net)
}

fn centered_square(size: usize) -> Tensor {
    let (lo, hi) = (size * 3 / 8, size * 5 / 8);
    Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
        ((lo..hi).contains(&y) && (lo..hi).contains(&x)) as u8 as f32
    })
}

/// Builds the CSV report. Fails if two completed rows disagree on the
/// convolution MAC count.
pub fn report(a: &BenchArgs, seed: u64, deterministic: bool) -> Result<String> {
    let model = model::select(&a.model, Some(&a.gates), seed)?;
    let net = model.net_size();
    if a.bench_sizes.is_empty() {
        return Err(CraError::InvalidArgument("--bench-sizes is empty".into()));
    }
    for &s in &a.bench_sizes {
        if s == 0 || s % net != 0 {
            return Err(CraError::Dimension(format!(
                "bench size {s} is not a multiple of {net}"
            )));
        }
    }
    let budget = a.mem_budget_mb * 1024 * 1024;
    let mut csv = format!("{HEADER}\n");
    let mut macs: Option<u64> = None;
    for &size in &a.bench_sizes {
        let peak = peak_estimate(size, &model);
        if peak > budget {
            writeln!(
                csv,
                "{size},{size},{size},,,,{peak},,skipped: estimate exceeds {} MiB",
                a.mem_budget_mb
            )
            .ok();
            continue;
        }
        let raw = Dataset::synthetic(1, size, seed)?.images.remove(0);
        let mask = centered_square(size);
        let t = Instant::now();
        let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default())?;
        let wall = if deterministic {
            String::new()
        } else {
            format!("{:.1}", t.elapsed().as_secs_f64() * 1e3)
        };
        if let Some(m) = macs {
            if m != r.conv_macs {
                return Err(CraError::Invariant(format!(
                    "conv MAC count changed with resolution: {m} vs {} at {size}",
                    r.conv_macs
                )));
            }
        }
        macs = Some(r.conv_macs);
        writeln!(
            csv,
            "{size},{size},{size},{},{},{},{peak},{wall},ok",
            r.conv_macs, r.resample_ops, r.aggregation_ops
        )
        .ok();
    }
    Ok(csv)
}

pub fn run(a: &BenchArgs, seed: u64, deterministic: bool) -> Result<()> {
    let csv = report(a, seed, deterministic)?;
    crate::emit(&csv, a.output.as_deref())
}
