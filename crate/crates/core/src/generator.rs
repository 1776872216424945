//! Coarse and refine networks built from the layer strings in [`crate::arch`],
//! and the full-resolution inpainting pipeline around them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, ArchSpec, ConvToken, Layer};
use crate::attention::{
    aggregate_residuals, compute_scores_with_patch, partition_cells, AttentionScores,
    CellPartition, SCORE_PATCH,
};
use crate::autograd::{Eager, Exec, Params, ScoreBatch};
use crate::error::{CraError, Result};
use crate::lwgc::{GateKind, GatedConvLayer};
use crate::resample::{self, DownMethod, MethodPair};
use crate::tensor::{self, Shape, Tensor};

/// Network resolution, width and gate choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Side of the square network input (512 at full scale).
    pub net_size: usize,
    /// Multiplier applied to every channel count except the RGB output.
    pub width: f32,
    pub coarse_gate: GateKind,
    pub refine_gate: GateKind,
    /// Window side of the patches compared when computing scores.
    pub score_patch: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::full()
    }
}

impl GeneratorConfig {
    pub fn full() -> Self {
        GeneratorConfig {
            net_size: 512,
            width: 1.0,
            coarse_gate: GateKind::LwgcSc,
            refine_gate: GateKind::LwgcPw,
            score_patch: SCORE_PATCH,
        }
    }

    /// Quarter width at 128x128; every spatial ratio of the full network
    /// is preserved, so the attention grid is 8x8.
    pub fn toy() -> Self {
        GeneratorConfig {
            net_size: 128,
            width: 0.25,
            ..GeneratorConfig::full()
        }
    }

    /// Side of the attention grid: the score map `P` is `net_size / 16`.
    pub fn grid(&self) -> usize {
        self.net_size / 16
    }

    pub fn channels(&self, c: usize) -> usize {
        if c == 3 {
            3
        } else {
            ((c as f32 * self.width).round() as usize).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.net_size < 32 || !self.net_size.is_multiple_of(32) {
            return Err(CraError::InvalidArgument(format!(
                "network size must be a positive multiple of 32, got {}",
                self.net_size
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(CraError::InvalidArgument(format!(
                "bad width multiplier {}",
                self.width
            )));
        }
        if self.score_patch == 0 || self.score_patch.is_multiple_of(2) {
            return Err(CraError::InvalidArgument("score patch must be odd".into()));
        }
        Ok(())
    }
}

/// One parsed chain with its instantiated gated layers, in conv order.
#[derive(Clone, Debug)]
struct Chain {
    spec: ArchSpec,
    layers: Vec<GatedConvLayer>,
}

#[derive(Clone, Debug)]
struct Branch {
    source: String,
    chain: Chain,
    out_channels: usize,
}

/// The instantiated two-stage architecture. Weights are kept separately in
/// a [`Params`] map.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    coarse: Chain,
    refine: Chain,
    attention: ArchSpec,
    branches: Vec<Branch>,
    /// Branch feeding each concat of the refine chain, in order.
    concat_branch: Vec<usize>,
}

/// Input channels of both stages: RGB plus the mask.
pub const STAGE_INPUT_CHANNELS: usize = 4;

fn conv_layer(
    cfg: &GeneratorConfig,
    tok: &ConvToken,
    name: String,
    cin: usize,
    gate: GateKind,
) -> GatedConvLayer {
    GatedConvLayer {
        name,
        kind: gate,
        cin,
        cout: cfg.channels(tok.channels),
        kernel: tok.kernel,
        stride: tok.stride,
        dilation: tok.dilation,
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let coarse_spec = arch::parse_arch(arch::COARSE)?;
        let refine_spec = arch::parse_arch(arch::REFINE)?;
        let attention = arch::parse_arch(arch::ATTENTION_BRANCH)?;
        let branch_specs = arch::TRANSFER_BRANCHES
            .iter()
            .map(|s| arch::parse_arch(s))
            .collect::<Result<Vec<_>>>()?;
        arch::validate_branches(&refine_spec, &branch_specs)?;

        let mut coarse_layers = Vec::new();
        let mut cin = STAGE_INPUT_CHANNELS;
        for (i, tok) in coarse_spec.convs().enumerate() {
            let l = conv_layer(
                &config,
                tok,
                format!("coarse.{i:02}"),
                cin,
                config.coarse_gate,
            );
            cin = l.cout;
            coarse_layers.push(l);
        }

        // Walk the refine chain tracking channel count and scale (log2 of the
        // downsampling relative to the input) so each concat can be matched
        // with the branch whose tap lives at the same resolution.
        let mut taps: BTreeMap<String, (usize, i32)> = BTreeMap::new();
        let mut refine_layers = Vec::new();
        let mut branches: Vec<Branch> = Vec::new();
        let mut concat_branch = Vec::new();
        let mut cin = STAGE_INPUT_CHANNELS;
        let mut scale = 0i32;
        for layer in &refine_spec.layers {
            match layer {
                Layer::Conv(tok) => {
                    let idx = refine_layers.len();
                    let l = conv_layer(
                        &config,
                        tok,
                        format!("refine.{idx:02}"),
                        cin,
                        config.refine_gate,
                    );
                    cin = l.cout;
                    scale += tok.stride.trailing_zeros() as i32;
                    refine_layers.push(l);
                    if let Some(t) = &tok.tap {
                        taps.insert(t.clone(), (cin, scale));
                    }
                }
                Layer::Downsample => scale += 1,
                Layer::Upsample => scale -= 1,
                Layer::Concat => {
                    let (_, spec) = branch_specs
                        .iter()
                        .enumerate()
                        .find(|(k, b)| {
                            !concat_branch.contains(k)
                                && b.source_tap().and_then(|t| taps.get(t)).map(|&(_, s)| s)
                                    == Some(scale)
                        })
                        .ok_or_else(|| {
                            CraError::Arch(format!("dangling concat at scale 1/{}", 1 << scale))
                        })?;
                    let src = spec.source_tap().expect("validated").to_string();
                    let (mut bc, _) = taps[&src];
                    let mut layers = Vec::new();
                    for (i, tok) in spec.convs().enumerate() {
                        let name = format!("refine.atm_{}.{i:02}", src.to_ascii_lowercase());
                        let l = conv_layer(&config, tok, name, bc, config.refine_gate);
                        bc = l.cout;
                        layers.push(l);
                    }
                    branches.push(Branch {
                        source: src,
                        chain: Chain {
                            spec: spec.clone(),
                            layers,
                        },
                        out_channels: bc,
                    });
                    concat_branch.push(branches.len() - 1);
                    cin += bc;
                }
                Layer::Clip | Layer::Tap(_) | Layer::Acm | Layer::Atm => {}
            }
        }
        Ok(Generator {
            config,
            coarse: Chain {
                spec: coarse_spec,
                layers: coarse_layers,
            },
            refine: Chain {
                spec: refine_spec,
                layers: refine_layers,
            },
            attention,
            branches,
            concat_branch,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Every gated layer: coarse, refine main chain, then branches.
    pub fn layers(&self) -> impl Iterator<Item = &GatedConvLayer> {
        self.coarse
            .layers
            .iter()
            .chain(&self.refine.layers)
            .chain(self.branches.iter().flat_map(|b| &b.chain.layers))
    }

    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        self.layers()
            .flat_map(GatedConvLayer::param_shapes)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(GatedConvLayer::param_count).sum()
    }

    /// Channel counts entering each concat of the refine chain, as
    /// `(decoder, branch)` pairs.
    pub fn concat_channels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut cin = STAGE_INPUT_CHANNELS;
        let mut next = 0;
        let mut convs = self.refine.layers.iter();
        for layer in &self.refine.spec.layers {
            match layer {
                Layer::Conv(_) => cin = convs.next().expect("layer per conv").cout,
                Layer::Concat => {
                    let b = &self.branches[self.concat_branch[next]];
                    next += 1;
                    out.push((cin, b.out_channels));
                    cin += b.out_channels;
                }
                _ => {}
            }
        }
        out
    }

    /// Fresh weights drawn from `seed`.
    pub fn init(&self, seed: u64) -> GeneratorWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for l in self.layers() {
            l.init(&mut rng, &mut params);
        }
        GeneratorWeights {
            config: self.config,
            params,
        }
    }

    pub fn zeros(&self) -> GeneratorWeights {
        GeneratorWeights {
            config: self.config,
            params: self
                .param_shapes()
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(s)))
                .collect(),
        }
    }

    /// Checks names and shapes of `params` against this architecture,
    /// listing every missing and unexpected name.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        let expected: BTreeMap<String, Shape> = self.param_shapes().into_iter().collect();
        let missing: Vec<&str> = expected
            .keys()
            .filter(|k| !params.contains_key(*k))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = params
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CraError::WeightMismatch(format!(
                "missing [{}]; unexpected [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for (name, shape) in &expected {
            let got = params[name].shape();
            if got != *shape {
                return Err(CraError::WeightMismatch(format!(
                    "`{name}` has shape {got}, expected {shape}"
                )));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, x: Shape, m: Shape) -> Result<()> {
        let n = self.config.net_size;
        if x.c != 3 || x.h != n || x.w != n || m != x.with_channels(1) {
            return Err(CraError::Shape(format!(
                "stage inputs must be (b, 3, {n}, {n}) and (b, 1, {n}, {n}), got {x} and {m}"
            )));
        }
        Ok(())
    }

    /// Coarse prediction at network size from the image and binary mask.
    pub fn coarse<E: Exec>(&self, ex: &mut E, x: &Tensor, mask: &Tensor) -> Result<E::Var> {
        self.check_inputs(x.shape(), mask.shape())?;
        let keep = mask.map(|v| 1.0 - v);
        let masked = x.mul(&keep)?;
        let input = ex.input(tensor::concat_channels(&[&masked, mask])?);
        let mut cur = input;
        let mut convs = self.coarse.layers.iter();
        for layer in &self.coarse.spec.layers {
            cur = match layer {
                Layer::Conv(_) => convs.next().expect("layer per conv").forward(ex, &cur)?,
                Layer::Downsample => ex.avg_pool(&cur, 2)?,
                Layer::Upsample => ex.nearest_up(&cur, 2)?,
                Layer::Clip => ex.clip(&cur, -1.0, 1.0)?,
                other => {
                    return Err(CraError::Arch(format!(
                        "`{other}` is not valid in the coarse chain"
                    )))
                }
            };
        }
        Ok(cur)
    }

    /// `coarse` inside the hole, `x` outside.
    pub fn blend<E: Exec>(
        &self,
        ex: &mut E,
        coarse: &E::Var,
        x: &Tensor,
        mask: &Tensor,
    ) -> Result<E::Var> {
        blend(ex, coarse, x, mask)
    }

    /// Per-item cell partitions of a network-size mask batch.
    pub fn partitions(&self, mask: &Tensor) -> Result<Vec<CellPartition>> {
        (0..mask.shape().n)
            .map(|n| partition_cells(&mask.batch_item(n), self.config.grid()))
            .collect()
    }

    /// Refined prediction and the attention scores computed on the way.
    pub fn refine<E: Exec>(
        &self,
        ex: &mut E,
        blended: &E::Var,
        mask: &Tensor,
    ) -> Result<(E::Var, ScoreBatch)> {
        let partitions = self.partitions(mask)?;
        let m = ex.input(mask.clone());
        let mut cur = ex.concat(&[blended, &m])?;
        let mut taps: BTreeMap<String, E::Var> = BTreeMap::new();
        let mut scores: Option<ScoreBatch> = None;
        let mut convs = self.refine.layers.iter();
        let mut next_concat = 0;
        for layer in &self.refine.spec.layers {
            cur = match layer {
                Layer::Conv(tok) => {
                    let out = convs.next().expect("layer per conv").forward(ex, &cur)?;
                    if let Some(t) = &tok.tap {
                        taps.insert(t.clone(), out.clone());
                    }
                    out
                }
                Layer::Downsample => ex.avg_pool(&cur, 2)?,
                Layer::Upsample => ex.nearest_up(&cur, 2)?,
                Layer::Clip => ex.clip(&cur, -1.0, 1.0)?,
                Layer::Concat => {
                    let branch = &self.branches[self.concat_branch[next_concat]];
                    next_concat += 1;
                    if scores.is_none() {
                        scores = Some(self.attention_scores(ex, &taps, &partitions)?);
                    }
                    let out = self.run_branch(ex, branch, &taps, scores.as_ref().expect("set"))?;
                    ex.concat(&[&cur, &out])?
                }
                other => {
                    return Err(CraError::Arch(format!(
                        "`{other}` is not valid in the refine chain"
                    )))
                }
            };
        }
        let scores = match scores {
            Some(s) => s,
            None => self.attention_scores(ex, &taps, &partitions)?,
        };
        Ok((cur, scores))
    }

    /// Runs the attention branch: pool the tapped features to the grid and
    /// score every hole cell against every context cell. Scores are
    /// computed from values, so no gradient flows through them.
    fn attention_scores<E: Exec>(
        &self,
        ex: &mut E,
        taps: &BTreeMap<String, E::Var>,
        partitions: &[CellPartition],
    ) -> Result<ScoreBatch> {
        let mut cur: Option<E::Var> = None;
        let mut result = None;
        for layer in &self.attention.layers {
            match layer {
                Layer::Tap(t) if cur.is_none() => {
                    let v = taps
                        .get(t)
                        .ok_or_else(|| CraError::Arch(format!("tap `{t}` not produced")))?;
                    cur = Some(v.clone());
                }
                Layer::Tap(_) | Layer::Atm => {}
                Layer::Downsample => {
                    let v = cur
                        .as_ref()
                        .ok_or_else(|| CraError::Arch("attention branch has no source".into()))?;
                    cur = Some(ex.avg_pool(v, 2)?);
                }
                Layer::Acm => {
                    let v = cur
                        .as_ref()
                        .ok_or_else(|| CraError::Arch("attention branch has no source".into()))?;
                    let map = ex.value(v);
                    let batch = (0..map.shape().n)
                        .map(|n| {
                            compute_scores_with_patch(
                                &map.batch_item(n),
                                &partitions[n],
                                self.config.score_patch,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    result = Some(Arc::new(batch));
                }
                other => {
                    return Err(CraError::Arch(format!(
                        "`{other}` is not valid in the attention branch"
                    )))
                }
            }
        }
        result.ok_or_else(|| CraError::Arch("attention branch has no ACM".into()))
    }

    fn run_branch<E: Exec>(
        &self,
        ex: &mut E,
        branch: &Branch,
        taps: &BTreeMap<String, E::Var>,
        scores: &ScoreBatch,
    ) -> Result<E::Var> {
        let src = taps
            .get(&branch.source)
            .ok_or_else(|| CraError::Arch(format!("tap `{}` not produced", branch.source)))?;
        let mut cur = src.clone();
        let mut convs = branch.chain.layers.iter();
        for layer in &branch.chain.spec.layers {
            match layer {
                Layer::Tap(_) | Layer::Concat => {}
                Layer::Atm => cur = ex.transfer(&cur, scores)?,
                Layer::Conv(_) => cur = convs.next().expect("layer per conv").forward(ex, &cur)?,
                other => {
                    return Err(CraError::Arch(format!(
                        "`{other}` is not valid in a transfer branch"
                    )))
                }
            }
        }
        Ok(cur)
    }

    /// Coarse, blend and refine on network-size inputs.
    pub fn forward<E: Exec>(
        &self,
        ex: &mut E,
        x: &Tensor,
        mask: &Tensor,
    ) -> Result<StageOutputs<E::Var>> {
        let coarse = self.coarse(ex, x, mask)?;
        let blended = blend(ex, &coarse, x, mask)?;
        let (refined, scores) = self.refine(ex, &blended, mask)?;
        Ok(StageOutputs {
            coarse,
            refined,
            scores,
        })
    }
}

/// Outputs of both stages for one batch.
pub struct StageOutputs<V> {
    pub coarse: V,
    pub refined: V,
    pub scores: ScoreBatch,
}

/// `coarse * m + x * (1 - m)`, exact for a binary mask.
pub fn blend<E: Exec>(ex: &mut E, coarse: &E::Var, x: &Tensor, mask: &Tensor) -> Result<E::Var> {
    let keep = mask.map(|v| 1.0 - v);
    let outside = ex.input(x.mul(&keep)?);
    let m = ex.input(mask.clone());
    let inside = ex.mul(coarse, &m)?;
    ex.add(&inside, &outside)
}

/// Generator weights together with the configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub config: GeneratorConfig,
    pub params: Params,
}

impl GeneratorWeights {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Anything that turns a network-size image and mask into a filled image
/// and the attention scores used to fill it.
pub trait InpaintModel {
    fn net_size(&self) -> usize;

    /// Returns the prediction, its scores and the convolution MACs spent.
    fn predict(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, AttentionScores, u64)>;
}

/// A generator bound to its weights.
pub struct Inpainter {
    pub generator: Generator,
    pub weights: GeneratorWeights,
}

impl Inpainter {
    pub fn new(weights: GeneratorWeights) -> Result<Self> {
        let generator = Generator::new(weights.config)?;
        generator.check_params(&weights.params)?;
        Ok(Inpainter { generator, weights })
    }
}

impl InpaintModel for Inpainter {
    fn net_size(&self) -> usize {
        self.generator.config.net_size
    }

    fn predict(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, AttentionScores, u64)> {
        let mut ex = Eager::new(&self.weights.params);
        let out = self.generator.forward(&mut ex, x, mask)?;
        let scores = out.scores[0].clone();
        Ok((out.refined, scores, ex.conv_macs()))
    }
}

/// Returns its (already down-sampled) input unchanged, with scores computed
/// from the image itself pooled to the attention grid. The pipeline output in
/// the hole is then the blurry down-up image plus aggregated residuals.
pub struct StubGenerator {
    pub net_size: usize,
}

impl InpaintModel for StubGenerator {
    fn net_size(&self) -> usize {
        self.net_size
    }

    fn predict(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, AttentionScores, u64)> {
        let grid = self.net_size / 16;
        let pooled = resample::downsample(x, (16, 16), DownMethod::Averaging)?;
        let part = partition_cells(mask, grid)?;
        let scores = compute_scores_with_patch(&pooled, &part, SCORE_PATCH)?;
        Ok((x.clone(), scores, 0))
    }
}

/// Result of one full-resolution inpainting run with work counters.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub output: Tensor,
    pub scores: AttentionScores,
    pub factors: (usize, usize),
    /// Convolution multiply-accumulates inside the generator.
    pub conv_macs: u64,
    /// Output samples produced by every resampling step.
    pub resample_ops: u64,
    /// Residual samples visited by aggregation.
    pub aggregation_ops: u64,
    pub timings: StageTimings,
}

/// Wall time spent in each pipeline stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageTimings {
    pub resample: Duration,
    pub network: Duration,
    pub aggregation: Duration,
}

fn check_binary_mask(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CraError::InvalidArgument(
            "mask must contain only 0 and 1".into(),
        ));
    }
    Ok(())
}

/// Down-samples a full-resolution mask and marks every cell touched by a
/// hole pixel.
pub fn downsample_mask(mask: &Tensor, factors: (usize, usize)) -> Result<Tensor> {
    Ok(
        resample::downsample(mask, factors, DownMethod::Averaging)?.map(|v| {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }),
    )
}

/// Inpaints a `(1, 3, H, W)` image in `[-1, 1]` with a `(1, 1, H, W)` binary
/// mask; `H` and `W` must be multiples of the network size.
pub fn inpaint_pipeline(
    model: &impl InpaintModel,
    raw: &Tensor,
    mask: &Tensor,
    pair: MethodPair,
) -> Result<PipelineReport> {
    let s = raw.shape();
    let net = model.net_size();
    if s.n != 1 || s.c != 3 {
        return Err(CraError::Shape(format!(
            "expected a (1, 3, H, W) image, got {s}"
        )));
    }
    if mask.shape() != s.with_channels(1) {
        return Err(CraError::Shape(format!(
            "mask {} does not match image {s}",
            mask.shape()
        )));
    }
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(net) || !s.w.is_multiple_of(net) {
        return Err(CraError::Dimension(format!(
            "image {}x{} must have height and width that are multiples of {net}",
            s.h, s.w
        )));
    }
    check_binary_mask(mask)?;
    let factors = (s.h / net, s.w / net);
    let full = (s.h * s.w) as u64;
    let small = (net * net) as u64;

    let mut timings = StageTimings::default();
    let t = Instant::now();
    let x_small = resample::downsample(raw, factors, pair.down)?;
    let m_small = downsample_mask(mask, factors)?;
    timings.resample += t.elapsed();
    let t = Instant::now();
    let (y_small, scores, conv_macs) = model.predict(&x_small, &m_small)?;
    timings.network = t.elapsed();
    let t = Instant::now();
    let up = resample::upsample(&y_small, factors, pair.up)?;
    let residual = resample::contextual_residual(raw, net, pair)?;
    timings.resample += t.elapsed();
    let t = Instant::now();
    let aggregate = aggregate_residuals(&residual, &scores)?;
    let hole = up.add(&aggregate)?;
    hole.ensure_finite("pipeline output")?;
    let output = tensor::select_by_mask(mask, &hole, raw)?;
    timings.aggregation = t.elapsed();

    // down raw (3ch) + down mask (1ch), up prediction (3ch), and the
    // down + up pair inside the residual (3ch each)
    let resample_ops = 3 * small + small + 3 * full + 3 * small + 3 * full;
    Ok(PipelineReport {
        output,
        scores,
        factors,
        conv_macs,
        resample_ops,
        aggregation_ops: 3 * full,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::uniform;
    use crate::resample::snap_to_lattice;

    fn toy() -> (Generator, GeneratorWeights) {
        let g = Generator::new(GeneratorConfig::toy()).unwrap();
        let w = g.init(5);
        (g, w)
    }

    fn square_mask(size: usize, y0: usize, x0: usize, side: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
            ((y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)) as u8 as f32
        })
    }

    fn lattice_image(size: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| {
            snap_to_lattice(rng.gen_range(0..=255) as f64 / 127.5 - 1.0)
        })
    }

    #[test]
    fn full_size_parameter_count_is_near_2_7m() {
        let g = Generator::new(GeneratorConfig::full()).unwrap();
        let n = g.param_count() as f64;
        assert!((n - 2.7e6).abs() <= 0.27e6, "{n}");
        assert_eq!(g.init(0).param_count(), g.param_count());
    }

    #[test]
    fn first_concat_joins_128_and_128() {
        let g = Generator::new(GeneratorConfig::full()).unwrap();
        assert_eq!(g.concat_channels(), vec![(128, 128), (64, 64), (32, 32)]);
    }

    #[test]
    fn coarse_shape_and_range() {
        let (g, w) = toy();
        let x = uniform(
            Shape::new(1, 3, 128, 128),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let m = square_mask(128, 32, 32, 40);
        let out = g.coarse(&mut Eager::new(&w.params), &x, &m).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 128, 128));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_weights_give_zero_coarse_output() {
        let g = Generator::new(GeneratorConfig::toy()).unwrap();
        let w = g.zeros();
        let x = uniform(
            Shape::new(1, 3, 128, 128),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let m = square_mask(128, 0, 0, 16);
        let out = g.coarse(&mut Eager::new(&w.params), &x, &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_switches_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, &mut rng);
        let x = uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, &mut rng);
        let p = Params::new();
        let mut ex = Eager::new(&p);
        let zero = Tensor::zeros(Shape::new(1, 1, 8, 8));
        let one = Tensor::full(Shape::new(1, 1, 8, 8), 1.0);
        assert_eq!(blend(&mut ex, &c, &x, &zero).unwrap(), x);
        assert_eq!(blend(&mut ex, &c, &x, &one).unwrap(), c);
        let half = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, xx| (xx < 4) as u8 as f32);
        let got = blend(&mut ex, &c, &x, &half).unwrap();
        assert_eq!(got, tensor::select_by_mask(&half, &c, &x).unwrap());
    }

    #[test]
    fn refine_shapes_and_score_size() {
        let (g, w) = toy();
        let x = uniform(
            Shape::new(1, 3, 128, 128),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let m = square_mask(128, 40, 40, 30);
        let mut ex = Eager::new(&w.params);
        let out = g.forward(&mut ex, &x, &m).unwrap();
        assert_eq!(out.refined.shape(), Shape::new(1, 3, 128, 128));
        assert_eq!(out.scores.len(), 1);
        assert_eq!(out.scores[0].matrix().len(), 64 * 64);
        out.scores[0].check_normalized(1e-5).unwrap();
        assert!(out.scores[0].partition().n_hole() > 0);
    }

    #[test]
    fn empty_mask_refine_is_well_defined() {
        let (g, w) = toy();
        let x = uniform(
            Shape::new(1, 3, 128, 128),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        let m = Tensor::zeros(Shape::new(1, 1, 128, 128));
        let out = g.forward(&mut Eager::new(&w.params), &x, &m).unwrap();
        assert_eq!(out.scores[0].partition().n_hole(), 0);
        out.refined.ensure_finite("refine").unwrap();
    }

    #[test]
    fn full_hole_is_rejected() {
        let (g, w) = toy();
        let x = Tensor::zeros(Shape::new(1, 3, 128, 128));
        let m = Tensor::full(Shape::new(1, 1, 128, 128), 1.0);
        assert!(matches!(
            g.forward(&mut Eager::new(&w.params), &x, &m),
            Err(CraError::EmptyContext)
        ));
    }

    #[test]
    fn weight_mismatch_lists_names() {
        let (g, mut w) = toy();
        w.params.remove("coarse.00.feat.w");
        w.params
            .insert("bogus".into(), Tensor::zeros(Shape::scalar()));
        let err = g.check_params(&w.params).unwrap_err().to_string();
        assert!(
            err.contains("coarse.00.feat.w") && err.contains("bogus"),
            "{err}"
        );
    }

    #[test]
    fn pipeline_pastes_back_outside_the_mask() {
        let (_, w) = toy();
        let model = Inpainter::new(w).unwrap();
        let raw = lattice_image(256, 7);
        let mask = square_mask(256, 64, 96, 70);
        let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default()).unwrap();
        for (i, (&o, &x)) in r.output.data().iter().zip(raw.data()).enumerate() {
            let p = i % (256 * 256);
            if mask.data()[p] == 0.0 {
                assert_eq!(o.to_bits(), x.to_bits());
            }
        }
        assert_eq!(r.factors, (2, 2));
    }

    #[test]
    fn empty_mask_returns_raw() {
        let model = Inpainter::new(toy().1).unwrap();
        let raw = lattice_image(128, 8);
        let mask = Tensor::zeros(Shape::new(1, 1, 128, 128));
        let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default()).unwrap();
        assert_eq!(r.output, raw);
    }

    #[test]
    fn identity_model_on_flat_image_reproduces_raw() {
        let model = StubGenerator { net_size: 128 };
        let v = snap_to_lattice(77.0 / 127.5 - 1.0);
        let raw = Tensor::full(Shape::new(1, 3, 512, 256), v);
        let mask = square_mask(512, 100, 10, 200).data()[..512 * 256].to_vec();
        let mask = Tensor::from_vec(Shape::new(1, 1, 512, 256), mask).unwrap();
        let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default()).unwrap();
        assert_eq!(r.output, raw);
    }

    #[test]
    fn degenerate_scale_is_refine_output_pasted() {
        let (g, w) = toy();
        let raw = lattice_image(128, 9);
        let mask = square_mask(128, 20, 20, 50);
        let model = Inpainter::new(w.clone()).unwrap();
        let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default()).unwrap();
        let y = g
            .forward(&mut Eager::new(&w.params), &raw, &mask)
            .unwrap()
            .refined;
        assert_eq!(r.output, tensor::select_by_mask(&mask, &y, &raw).unwrap());
    }

    #[test]
    fn network_cost_is_resolution_independent() {
        let model = Inpainter::new(toy().1).unwrap();
        let mut macs = Vec::new();
        for size in [128, 256, 512] {
            let raw = lattice_image(size, 10);
            let mask = square_mask(size, size / 4, size / 4, size / 3);
            let r = inpaint_pipeline(&model, &raw, &mask, MethodPair::default()).unwrap();
            macs.push(r.conv_macs);
        }
        assert!(macs[0] > 0);
        assert!(macs.iter().all(|&m| m == macs[0]));
    }

    #[test]
    fn non_multiple_size_is_a_dimension_error() {
        let model = StubGenerator { net_size: 128 };
        let raw = Tensor::zeros(Shape::new(1, 3, 200, 128));
        let mask = Tensor::zeros(Shape::new(1, 1, 200, 128));
        assert!(matches!(
            inpaint_pipeline(&model, &raw, &mask, MethodPair::default()),
            Err(CraError::Dimension(_))
        ));
    }
}
