//! Reverse-mode differentiation over a recorded tape.

mod exec;
pub mod gradcheck;
mod graph;

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub use exec::{Eager, Exec};
pub use gradcheck::{finite_diff_check, CheckReport};
pub use graph::{GradMap, Graph, ScoreBatch, Var};

/// Named trainable tensors.
pub type Params = BTreeMap<String, Tensor>;
