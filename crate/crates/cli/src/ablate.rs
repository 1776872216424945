use std::fmt::Write as _;

use cra_core::generator::{inpaint_pipeline, Generator};
use cra_core::io::{load_image, load_mask, value_to_pixel};
use cra_core::lwgc::GateKind;
use cra_core::resample::{DownMethod, MethodPair, UpMethod};
use cra_core::training::{train, TrainingConfig};
use cra_core::{CraError, Result, Tensor};

use crate::args::{AblateGatesArgs, AblateResampleArgs};
use crate::{model, train as train_cmd};

/// Mean absolute error and PSNR over hole pixels, both on the 8-bit scale.
fn hole_errors(out: &Tensor, truth: &Tensor, mask: &Tensor) -> (f64, f64) {
    let s = out.shape();
    let (mut abs, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                if mask.at(0, 0, y, x) == 0.0 {
                    continue;
                }
                let d = value_to_pixel(out.at(0, c, y, x)) as f64
                    - value_to_pixel(truth.at(0, c, y, x)) as f64;
                abs += d.abs();
                sq += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (0.0, f64::INFINITY);
    }
    let mse = sq / n as f64;
    (abs / n as f64, 10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Runs all twelve down/up pairs; the input image doubles as ground truth.
pub fn resample(a: &AblateResampleArgs, seed: u64) -> Result<()> {
    model::require_explicit(&a.model)?;
    let truth = load_image(&a.input)?;
    let mask = load_mask(&a.mask)?;
    let model = model::select(&a.model, None, seed)?;
    let mut csv = String::from("down,up,l1_hole,psnr_hole\n");
    for down in DownMethod::ALL {
        for up in UpMethod::ALL {
            let r = inpaint_pipeline(&model, &truth, &mask, MethodPair { down, up })?;
            let (l1, psnr) = hole_errors(&r.output, &truth, &mask);
            writeln!(csv, "{down},{up},{l1:.4},{psnr:.3}").ok();
        }
    }
    crate::emit(&csv, a.output.as_deref())
}

/// Trains one toy model per gate combination and reports the held-out
/// reconstruction loss before and after.
pub fn gates(a: &AblateGatesArgs, seed: u64) -> Result<()> {
    let pick = |v: &[GateKind]| {
        if v.is_empty() {
            GateKind::ALL.to_vec()
        } else {
            v.to_vec()
        }
    };
    let (coarse, refine) = (pick(&a.gates.gates_coarse), pick(&a.gates.gates_refine));
    let base = TrainingConfig {
        g_steps: a.steps,
        seed,
        record_wall_time: false,
        ..TrainingConfig::toy()
    };
    let data = train_cmd::dataset(&a.data, &base.generator, seed)?;
    let mut csv = String::from("coarse_gate,refine_gate,params,initial_l_rec,final_l_rec\n");
    for &c in &coarse {
        for &r in &refine {
            let generator = model::config(true, Some(c), Some(r));
            let params = Generator::new(generator)?.param_count();
            let cfg = TrainingConfig {
                generator,
                ..base.clone()
            };
            let s = train(cfg, &data, None, std::io::sink())
                .map_err(|e| CraError::Training(format!("{c}/{r}: {e}")))?;
            writeln!(
                csv,
                "{c},{r},{params},{:.6},{:.6}",
                s.initial_eval, s.final_eval
            )
            .ok();
        }
    }
    crate::emit(&csv, a.output.as_deref())
}
