use cra_core::generator::{inpaint_pipeline, InpaintModel};
use cra_core::io::{load_image, load_mask, save_image};
use cra_core::resample::MethodPair;
use cra_core::tensor::{crop, pad_reflect};
use cra_core::{CraError, Result, Shape, Tensor};

use crate::args::InpaintArgs;
use crate::model;

pub fn run(a: &InpaintArgs, seed: u64) -> Result<()> {
    model::require_explicit(&a.model)?;
    let raw = load_image(&a.input)?;
    let mask = load_mask(&a.mask)?;
    let (s, ms) = (raw.shape(), mask.shape());
    if (s.h, s.w) != (ms.h, ms.w) {
        return Err(CraError::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            s.w, s.h, ms.w, ms.h
        )));
    }
    let model = model::select(&a.model, None, seed)?;
    let net = model.net_size();
    let (raw_p, mask_p) = if a.pad {
        let (h, w) = (s.h.div_ceil(net) * net, s.w.div_ceil(net) * net);
        // padded pixels are context, never holes
        let mask_p = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            if y < s.h && x < s.w {
                mask.at(0, 0, y, x)
            } else {
                0.0
            }
        });
        (pad_reflect(&raw, h, w)?, mask_p)
    } else {
        (raw.clone(), mask)
    };
    let pair = MethodPair {
        down: a.methods.down,
        up: a.methods.up,
    };
    let report = inpaint_pipeline(&model, &raw_p, &mask_p, pair)?;
    let out = crop(&report.output, s.h, s.w)?;
    save_image(&out, &a.output)?;
    let t = report.timings;
    println!(
        "resample {:.3}s  network {:.3}s  aggregation {:.3}s  conv_macs {}",
        t.resample.as_secs_f64(),
        t.network.as_secs_f64(),
        t.aggregation.as_secs_f64(),
        report.conv_macs
    );
    Ok(())
}
