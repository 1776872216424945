use std::fs::File;
use std::io::BufWriter;

use cra_core::generator::GeneratorConfig;
use cra_core::training::{train, AdamConfig, Dataset, TrainSummary, TrainingConfig};
use cra_core::{CraError, Result};

use crate::args::{DataArgs, TrainArgs};
use crate::model;

/// Images for training; synthetic sets are generated at the network size.
pub fn dataset(d: &DataArgs, cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    match (&d.input, d.synthetic) {
        (Some(dir), _) => Dataset::load_dir(dir, cfg.net_size),
        (None, Some(n)) => Dataset::synthetic(n, cfg.net_size, seed),
        (None, None) => Err(CraError::InvalidArgument(
            "pass --input DIR or --synthetic N".into(),
        )),
    }
}

pub fn config(a: &TrainArgs, seed: u64, deterministic: bool) -> Result<TrainingConfig> {
    let (coarse, refine) = model::single_gates(&a.gates)?;
    let mut cfg = TrainingConfig::toy();
    cfg.generator = model::config(a.toy, coarse, refine);
    if !a.toy {
        cfg.disc_width = 1.0;
    }
    cfg.seed = seed;
    cfg.record_wall_time = !deterministic;
    if let Some(s) = a.steps {
        cfg.g_steps = s;
    }
    if let Some(b) = a.batch {
        if b == 0 {
            return Err(CraError::InvalidArgument(
                "--batch must be at least 1".into(),
            ));
        }
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.adam = AdamConfig { lr, ..cfg.adam };
    }
    Ok(cfg)
}

pub fn print_summary(s: &TrainSummary) {
    println!(
        "generator updates {}  critic updates {}  eval L_rec {:.5} -> {:.5}",
        s.generator_updates, s.critic_updates, s.initial_eval, s.final_eval
    );
}

pub fn run(a: &TrainArgs, seed: u64, deterministic: bool) -> Result<()> {
    let cfg = config(a, seed, deterministic)?;
    let data = dataset(&a.data, &cfg.generator, seed)?;
    std::fs::create_dir_all(&a.output).map_err(|e| CraError::Io {
        path: a.output.clone(),
        source: e,
    })?;
    let log_path = a.output.join("train_log.jsonl");
    let log = File::create(&log_path).map_err(|e| CraError::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let summary = train(cfg, &data, Some(&a.output), BufWriter::new(log))?;
    print_summary(&summary);
    Ok(())
}
