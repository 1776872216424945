//! Generator selection shared by the inference-style commands.

use cra_core::attention::AttentionScores;
use cra_core::container::load_weights;
use cra_core::generator::{GeneratorConfig, InpaintModel, Inpainter, StubGenerator};
use cra_core::lwgc::GateKind;
use cra_core::{Result, Tensor};

use crate::args::{GateArgs, ModelArgs};

pub enum Model {
    Trained(Box<Inpainter>),
    Stub(StubGenerator),
}

impl InpaintModel for Model {
    fn net_size(&self) -> usize {
        match self {
            Model::Trained(m) => m.net_size(),
            Model::Stub(m) => m.net_size(),
        }
    }

    fn predict(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, AttentionScores, u64)> {
        match self {
            Model::Trained(m) => m.predict(x, mask),
            Model::Stub(m) => m.predict(x, mask),
        }
    }
}

fn base_config(toy: bool) -> GeneratorConfig {
    if toy {
        GeneratorConfig::toy()
    } else {
        GeneratorConfig::full()
    }
}

/// Single gate kinds from the override flags.
pub fn single_gates(gates: &GateArgs) -> Result<(Option<GateKind>, Option<GateKind>)> {
    let one = |v: &[GateKind], flag: &str| match v {
        [] => Ok(None),
        [k] => Ok(Some(*k)),
        _ => Err(cra_core::CraError::InvalidArgument(format!(
            "{flag} takes one gate kind here"
        ))),
    };
    Ok((
        one(&gates.gates_coarse, "--gates-coarse")?,
        one(&gates.gates_refine, "--gates-refine")?,
    ))
}

pub fn config(toy: bool, coarse: Option<GateKind>, refine: Option<GateKind>) -> GeneratorConfig {
    let mut c = base_config(toy);
    if let Some(k) = coarse {
        c.coarse_gate = k;
    }
    if let Some(k) = refine {
        c.refine_gate = k;
    }
    c
}

/// Loads `--weights`, builds the stub for `--stub`, and otherwise initializes
/// a fresh generator from `seed` (useful only for cost measurements).
pub fn select(m: &ModelArgs, gates: Option<&GateArgs>, seed: u64) -> Result<Model> {
    if let Some(path) = &m.weights {
        return Ok(Model::Trained(Box::new(Inpainter::new(load_weights(
            path,
        )?)?)));
    }
    let (coarse, refine) = match gates {
        Some(g) => single_gates(g)?,
        None => (None, None),
    };
    let cfg = config(m.toy, coarse, refine);
    if m.stub {
        return Ok(Model::Stub(StubGenerator {
            net_size: cfg.net_size,
        }));
    }
    let g = cra_core::generator::Generator::new(cfg)?;
    Ok(Model::Trained(Box::new(Inpainter::new(g.init(seed))?)))
}

/// `--weights` or `--stub` is required where outputs must mean something.
pub fn require_explicit(m: &ModelArgs) -> Result<()> {
    if m.weights.is_none() && !m.stub {
        return Err(cra_core::CraError::InvalidArgument(
            "pass --weights PATH or --stub".into(),
        ));
    }
    Ok(())
}
