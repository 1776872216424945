use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cra_core::io::save_mask;
use cra_core::training::masks::load_templates;
use cra_core::training::{generate_mask, MaskSpec};
use cra_core::{CraError, Result};

use crate::args::MaskgenArgs;

pub fn run(a: &MaskgenArgs, seed: u64) -> Result<()> {
    let templates = match &a.templates {
        Some(dir) => load_templates(dir)?,
        None => Vec::new(),
    };
    let spec = MaskSpec {
        mode: a.mode,
        max_area_fraction: a.max_area,
        templates,
        ..MaskSpec::default()
    };
    std::fs::create_dir_all(&a.output).map_err(|e| CraError::Io {
        path: a.output.clone(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..a.count {
        let m = generate_mask(a.size, a.size, &spec, &mut rng)?;
        save_mask(&m, &a.output.join(format!("mask_{i:05}.png")))?;
    }
    println!("wrote {} masks to {}", a.count, a.output.display());
    Ok(())
}
