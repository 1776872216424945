//! Alternating critic / generator updates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::Dataset;
use super::discriminator::Discriminator;
use super::losses::{self, LossWeights};
use super::masks::{generate_mask, MaskSpec};
use super::optim::{Adam, AdamConfig};
use crate::attention::partition_cells;
use crate::autograd::{Eager, GradMap, Graph, Params, Var};
use crate::container::{save_weights, Container};
use crate::error::{CraError, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorWeights};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub generator: GeneratorConfig,
    /// Channel multiplier of the critic.
    pub disc_width: f32,
    pub losses: LossWeights,
    pub adam: AdamConfig,
    pub d_steps_per_g: usize,
    pub batch: usize,
    /// Generator updates to run.
    pub g_steps: usize,
    pub seed: u64,
    pub mask: MaskSpec,
    /// Checkpoint period in generator steps; 0 keeps only the first and last.
    pub checkpoint_every: usize,
    /// Write elapsed seconds into log records. Off for byte-reproducible logs.
    pub record_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::toy()
    }
}

impl TrainingConfig {
    /// 128x128 images, quarter-width networks.
    pub fn toy() -> Self {
        TrainingConfig {
            generator: GeneratorConfig::toy(),
            disc_width: 0.25,
            losses: LossWeights::default(),
            adam: AdamConfig::default(),
            d_steps_per_g: 5,
            batch: 4,
            g_steps: 500,
            seed: 0,
            mask: MaskSpec::default(),
            checkpoint_every: 100,
            record_wall_time: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    Critic,
    Generator,
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean critic loss over the inner steps.
    pub l_d: f64,
    /// Refine-stage reconstruction loss.
    pub l_rec: f64,
    pub l_rec_coarse: f64,
    pub l_adv: f64,
    pub l_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Fixed images and masks for tracking reconstruction loss.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl EvalSet {
    pub fn new(data: &Dataset, spec: &MaskSpec, grid: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = data
            .images
            .iter()
            .map(|_| trainable_mask(data.size, spec, grid, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            images: data.images.clone(),
            masks,
        })
    }
}

/// Draws masks until one leaves at least one context cell on the attention
/// grid; a mask touching every cell gives attention nothing to copy from.
fn trainable_mask(
    size: usize,
    spec: &MaskSpec,
    grid: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let m = generate_mask(size, size, spec, rng)?;
        match partition_cells(&m, grid) {
            Ok(_) => return Ok(m),
            Err(CraError::EmptyContext) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CraError::Training(format!(
        "{ATTEMPTS} consecutive masks left no context cell on a {grid}x{grid} grid"
    )))
}

/// Weighted L1 reconstruction of one prediction, evaluated directly.
pub fn reconstruction_value(y: &Tensor, x: &Tensor, mask: &Tensor, w: &LossWeights) -> Result<f64> {
    if y.shape() != x.shape() || mask.shape() != x.shape().with_channels(1) {
        return Err(CraError::Shape(format!(
            "{} vs {} with mask {}",
            y.shape(),
            x.shape(),
            mask.shape()
        )));
    }
    let s = x.shape();
    let plane = s.h * s.w;
    let (mut hole, mut ctx) = (0.0f64, 0.0f64);
    for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
        let n = i / (s.c * plane);
        let e = (a as f64 - b as f64).abs();
        if mask.data()[n * plane + i % plane] != 0.0 {
            hole += e;
        } else {
            ctx += e;
        }
    }
    let count = x.len() as f64;
    Ok(w.alpha1 as f64 * hole / count + w.alpha2 as f64 * ctx / count)
}

pub struct Trainer {
    pub config: TrainingConfig,
    generator: Generator,
    g_weights: GeneratorWeights,
    disc: Discriminator,
    d_params: Params,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
    updates: Vec<Update>,
    step: usize,
}

fn gradients(g: &mut Graph<'_>, loss: Var, names: impl Iterator<Item = String>) -> Result<GradMap> {
    let mut named = Vec::new();
    for n in names {
        let v = g.param(&n)?;
        named.push((n, v));
    }
    let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
    let grads = g.grad(loss, &vars)?;
    Ok(named
        .into_iter()
        .zip(grads)
        .map(|((n, v), gr)| {
            let t = match gr {
                Some(gr) => g.value(gr).clone(),
                None => Tensor::zeros(g.value(v).shape()),
            };
            (n, t)
        })
        .collect())
}

fn finite(what: &str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CraError::NonFinite(format!(
            "{what} at generator step {step}"
        )))
    }
}

struct GLosses {
    rec: f64,
    rec_coarse: f64,
    adv: f64,
    total: f64,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        if config.batch == 0 || config.d_steps_per_g == 0 {
            return Err(CraError::InvalidArgument(
                "batch and critic steps must be positive".into(),
            ));
        }
        let generator = Generator::new(config.generator)?;
        let g_weights = generator.init(config.seed);
        let disc = Discriminator::new(config.generator.net_size, config.disc_width)?;
        let d_params = disc.init(config.seed.wrapping_add(1));
        Ok(Trainer {
            g_opt: Adam::new(config.adam),
            d_opt: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            config,
            generator,
            g_weights,
            disc,
            d_params,
            updates: Vec::new(),
            step: 0,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_weights(&self) -> &GeneratorWeights {
        &self.g_weights
    }

    pub fn discriminator_params(&self) -> &Params {
        &self.d_params
    }

    /// Every update applied so far, in order.
    pub fn updates(&self) -> &[Update] {
        &self.updates
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn sample(&mut self, data: &Dataset) -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(self.config.batch);
        let mut ms = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            xs.push(data.images[self.rng.gen_range(0..data.len())].clone());
            ms.push(trainable_mask(
                data.size,
                &self.config.mask,
                self.config.generator.grid(),
                &mut self.rng,
            )?);
        }
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ms)?))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.size != self.config.generator.net_size {
            return Err(CraError::Dimension(format!(
                "dataset images are {0}x{0}, network expects {1}x{1}",
                data.size, self.config.generator.net_size
            )));
        }
        Ok(())
    }

    /// One critic update on a freshly inpainted and pasted batch.
    pub fn critic_step(&mut self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let (x, m) = self.sample(data)?;
        let y = {
            let mut ex = Eager::new(&self.g_weights.params);
            self.generator.forward(&mut ex, &x, &m)?.refined
        };
        let pasted = tensor::select_by_mask(&m, &y, &x)?;
        let alphas = losses::sample_alphas(self.config.batch, &mut self.rng);
        let disc = &self.disc;
        let mut g = Graph::with_params(&self.d_params);
        let parts = losses::d_loss(
            &mut g,
            |g, v| disc.forward(g, &v),
            &x,
            &pasted,
            &alphas,
            self.config.losses.sigma,
        )?;
        let l_d = finite("critic loss", self.step, g.scalar(parts.total)?)?;
        let grads = gradients(&mut g, parts.total, self.d_params.keys().cloned())?;
        drop(g);
        self.d_opt.step(&mut self.d_params, &grads)?;
        self.updates.push(Update::Critic);
        Ok(l_d)
    }

    fn generator_step(&mut self, data: &Dataset) -> Result<GLosses> {
        self.check_data(data)?;
        let (x, m) = self.sample(data)?;
        let mut all = self.g_weights.params.clone();
        all.extend(self.d_params.iter().map(|(k, v)| (k.clone(), v.clone())));
        let w = self.config.losses;
        let mut g = Graph::with_params(&all);
        let out = self.generator.forward(&mut g, &x, &m)?;
        let rec = losses::reconstruction(&mut g, out.refined, &x, &m, &w)?;
        let rec_coarse = losses::reconstruction(&mut g, out.coarse, &x, &m, &w)?;
        let pasted = losses::paste_back(&mut g, out.refined, &x, &m)?;
        let d_fake = self.disc.forward(&mut g, &pasted)?;
        let adv = losses::adversarial(&mut g, d_fake)?;
        let recs = g.add(rec, rec_coarse)?;
        let weighted = g.scale(adv, w.beta)?;
        let total = g.add(recs, weighted)?;
        let result = GLosses {
            rec: finite("reconstruction loss", self.step, g.scalar(rec)?)?,
            rec_coarse: g.scalar(rec_coarse)?,
            adv: g.scalar(adv)?,
            total: finite("generator loss", self.step, g.scalar(total)?)?,
        };
        let grads = gradients(&mut g, total, self.g_weights.params.keys().cloned())?;
        drop(g);
        self.g_opt.step(&mut self.g_weights.params, &grads)?;
        self.updates.push(Update::Generator);
        Ok(result)
    }

    /// `d_steps_per_g` critic updates followed by one generator update.
    pub fn outer_step(&mut self, data: &Dataset, started: Instant) -> Result<StepRecord> {
        let mut l_d = 0.0;
        for _ in 0..self.config.d_steps_per_g {
            l_d += self.critic_step(data)?;
        }
        let gl = self.generator_step(data)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            l_d: l_d / self.config.d_steps_per_g as f64,
            l_rec: gl.rec,
            l_rec_coarse: gl.rec_coarse,
            l_adv: gl.adv,
            l_g: gl.total,
            wall_time: self
                .config
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64()),
        })
    }

    /// Mean refine-stage reconstruction loss over `eval`.
    pub fn evaluate(&self, eval: &EvalSet) -> Result<f64> {
        let mut total = 0.0;
        for (x, m) in eval.images.iter().zip(&eval.masks) {
            let mut ex = Eager::new(&self.g_weights.params);
            let y = self.generator.forward(&mut ex, x, m)?.refined;
            total += reconstruction_value(&y, x, m, &self.config.losses)?;
        }
        Ok(total / eval.images.len() as f64)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_weights(
            &self.g_weights,
            &dir.join(format!("generator_{:06}.craw", self.step)),
        )?;
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert("kind".to_string(), "discriminator".to_string());
        metadata.insert("input_size".to_string(), self.disc.input_size.to_string());
        metadata.insert("width".to_string(), self.config.disc_width.to_string());
        Container {
            metadata,
            tensors: self.d_params.clone(),
        }
        .save(&dir.join(format!("discriminator_{:06}.craw", self.step)))
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub initial_eval: f64,
    pub final_eval: f64,
    pub records: Vec<StepRecord>,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub updates: Vec<Update>,
    pub weights: GeneratorWeights,
}

/// Runs `config.g_steps` outer iterations, writing one JSON record per
/// iteration to `log` and checkpoints into `out_dir`.
pub fn train(
    config: TrainingConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut log: impl Write,
) -> Result<TrainSummary> {
    let started = Instant::now();
    let mut trainer = Trainer::new(config)?;
    trainer.check_data(data)?;
    let eval = EvalSet::new(
        data,
        &trainer.config.mask,
        trainer.config.generator.grid(),
        trainer.config.seed ^ 0x5eed,
    )?;
    let initial_eval = trainer.evaluate(&eval)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CraError::io(dir, e))?;
        trainer.save_checkpoint(dir)?;
    }
    let mut records = Vec::with_capacity(trainer.config.g_steps);
    for _ in 0..trainer.config.g_steps {
        let rec = trainer.outer_step(data, started)?;
        let line = serde_json::to_string(&rec).map_err(|e| CraError::Training(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| CraError::io("<training log>", e))?;
        records.push(rec);
        if let Some(dir) = out_dir {
            let every = trainer.config.checkpoint_every;
            let last = trainer.step == trainer.config.g_steps;
            if last || (every > 0 && trainer.step % every == 0) {
                trainer.save_checkpoint(dir)?;
            }
        }
    }
    let final_eval = trainer.evaluate(&eval)?;
    let updates = trainer.updates.clone();
    Ok(TrainSummary {
        initial_eval,
        final_eval,
        records,
        critic_updates: updates.iter().filter(|u| **u == Update::Critic).count(),
        generator_updates: updates.iter().filter(|u| **u == Update::Generator).count(),
        updates,
        weights: trainer.g_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainingConfig {
        TrainingConfig {
            generator: GeneratorConfig {
                net_size: 64,
                width: 0.125,
                ..GeneratorConfig::toy()
            },
            disc_width: 0.125,
            batch: 1,
            g_steps: 2,
            d_steps_per_g: 2,
            record_wall_time: false,
            ..TrainingConfig::toy()
        }
    }

    #[test]
    fn update_pattern_follows_critic_ratio() {
        let data = Dataset::synthetic(2, 64, 0).unwrap();
        let s = train(tiny(), &data, None, std::io::sink()).unwrap();
        use Update::*;
        assert_eq!(
            s.updates,
            vec![Critic, Critic, Generator, Critic, Critic, Generator]
        );
        assert_eq!((s.critic_updates, s.generator_updates), (4, 2));
    }

    #[test]
    fn zero_lr_keeps_weights_bit_identical() {
        let data = Dataset::synthetic(2, 64, 0).unwrap();
        let cfg = TrainingConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..tiny()
        };
        let init = Generator::new(cfg.generator).unwrap().init(cfg.seed);
        let s = train(cfg, &data, None, std::io::sink()).unwrap();
        assert_eq!(s.weights, init);
    }

    #[test]
    fn overfits_a_single_repeated_image() {
        let data = Dataset::synthetic(1, 64, 3).unwrap();
        let cfg = TrainingConfig {
            g_steps: 200,
            ..tiny()
        };
        let s = train(cfg, &data, None, std::io::sink()).unwrap();
        let last = s.records.last().unwrap().l_rec;
        assert!(
            last < s.records[0].l_rec,
            "{} -> {last}",
            s.records[0].l_rec
        );
        assert!(s.final_eval < s.initial_eval);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let data = Dataset::synthetic(1, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig {
            g_steps: 0,
            ..tiny()
        };
        let mut log = Vec::new();
        let s = train(cfg, &data, Some(dir.path()), &mut log).unwrap();
        assert!(s.records.is_empty() && log.is_empty());
        let w = crate::container::load_weights(&dir.path().join("generator_000000.craw")).unwrap();
        assert_eq!(w, s.weights);
        assert!(dir.path().join("discriminator_000000.craw").exists());
    }

    #[test]
    fn log_lines_are_json_and_reproducible() {
        let data = Dataset::synthetic(2, 64, 0).unwrap();
        let run = || {
            let mut log = Vec::new();
            train(tiny(), &data, None, &mut log).unwrap();
            log
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["step", "l_d", "l_rec", "l_adv", "l_g"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn critic_never_sees_generated_pixels_off_mask() {
        let data = Dataset::synthetic(1, 64, 0).unwrap();
        let mut t = Trainer::new(tiny()).unwrap();
        let (x, m) = t.sample(&data).unwrap();
        let y = t
            .generator
            .forward(&mut Eager::new(&t.g_weights.params), &x, &m)
            .unwrap()
            .refined;
        let pasted = tensor::select_by_mask(&m, &y, &x).unwrap();
        for (i, (&p, &xv)) in pasted.data().iter().zip(x.data()).enumerate() {
            if m.data()[i % (64 * 64)] == 0.0 {
                assert_eq!(p.to_bits(), xv.to_bits());
            }
        }
    }

    #[test]
    fn mismatched_dataset_size_is_rejected() {
        let data = Dataset::synthetic(1, 128, 0).unwrap();
        assert!(matches!(
            train(tiny(), &data, None, std::io::sink()),
            Err(CraError::Dimension(_))
        ));
    }

    #[test]
    fn reconstruction_value_agrees_with_graph_loss() {
        let data = Dataset::synthetic(2, 64, 4).unwrap();
        let x = Tensor::stack(&data.images).unwrap();
        let y = x.map(|v| v * 0.5 + 0.1);
        let m = Tensor::from_fn(x.shape().with_channels(1), |n, _, yy, _| {
            ((yy + n * 9) % 5 == 0) as u8 as f32
        });
        let w = LossWeights::default();
        let mut g = Graph::new();
        let yv = g.variable(y.clone());
        let l = losses::reconstruction(&mut g, yv, &x, &m, &w).unwrap();
        assert!(
            (g.scalar(l).unwrap() - reconstruction_value(&y, &x, &m, &w).unwrap()).abs() < 1e-6
        );
    }
}
