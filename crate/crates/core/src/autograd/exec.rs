use crate::conv::{self, ConvParams};
use crate::error::{CraError, Result};
use crate::tensor::{self, Tensor};

use super::graph::{self, Graph, ScoreBatch, Var};
use super::Params;

/// Operations shared by the recording [`Graph`] and the tape-free
/// [`Eager`] executor, so network code is written once.
pub trait Exec {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    fn input(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, name: &str) -> Result<Self::Var>;
    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, p: ConvParams) -> Result<Self::Var>;
    fn bias_add(&mut self, x: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn elu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn sigmoid(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, k: f32) -> Result<Self::Var>;
    fn concat(&mut self, parts: &[&Self::Var]) -> Result<Self::Var>;
    fn clip(&mut self, x: &Self::Var, lo: f32, hi: f32) -> Result<Self::Var>;
    fn avg_pool(&mut self, x: &Self::Var, f: usize) -> Result<Self::Var>;
    fn nearest_up(&mut self, x: &Self::Var, f: usize) -> Result<Self::Var>;
    fn transfer(&mut self, x: &Self::Var, scores: &ScoreBatch) -> Result<Self::Var>;
    fn dense(&mut self, x: &Self::Var, w: &Self::Var) -> Result<Self::Var>;
    /// Convolution multiply-accumulates executed so far.
    fn conv_macs(&self) -> u64;
}

impl Exec for Graph<'_> {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Graph::value(self, *v)
    }
    fn input(&mut self, t: Tensor) -> Var {
        self.constant(t)
    }
    fn param(&mut self, name: &str) -> Result<Var> {
        Graph::param(self, name)
    }
    fn conv2d(&mut self, x: &Var, w: &Var, p: ConvParams) -> Result<Var> {
        Graph::conv2d(self, *x, *w, p)
    }
    fn bias_add(&mut self, x: &Var, b: &Var) -> Result<Var> {
        Graph::bias_add(self, *x, *b)
    }
    fn elu(&mut self, x: &Var) -> Result<Var> {
        Graph::elu(self, *x)
    }
    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        Graph::sigmoid(self, *x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::mul(self, *a, *b)
    }
    fn scale(&mut self, x: &Var, k: f32) -> Result<Var> {
        Graph::scale(self, *x, k)
    }
    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let v: Vec<Var> = parts.iter().map(|v| **v).collect();
        Graph::concat(self, &v)
    }
    fn clip(&mut self, x: &Var, lo: f32, hi: f32) -> Result<Var> {
        Graph::clip(self, *x, lo, hi)
    }
    fn avg_pool(&mut self, x: &Var, f: usize) -> Result<Var> {
        Graph::avg_pool(self, *x, f)
    }
    fn nearest_up(&mut self, x: &Var, f: usize) -> Result<Var> {
        Graph::nearest_up(self, *x, f)
    }
    fn transfer(&mut self, x: &Var, scores: &ScoreBatch) -> Result<Var> {
        Graph::transfer(self, *x, scores)
    }
    fn dense(&mut self, x: &Var, w: &Var) -> Result<Var> {
        Graph::dense(self, *x, *w)
    }
    fn conv_macs(&self) -> u64 {
        Graph::conv_macs(self)
    }
}

/// Executes operations immediately without recording anything.
pub struct Eager<'w> {
    params: &'w Params,
    conv_macs: u64,
}

impl<'w> Eager<'w> {
    pub fn new(params: &'w Params) -> Self {
        Eager {
            params,
            conv_macs: 0,
        }
    }
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    t.ensure_finite(what)?;
    Ok(t)
}

impl Exec for Eager<'_> {
    type Var = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| CraError::WeightMismatch(format!("missing parameter `{name}`")))
    }
    fn conv2d(&mut self, x: &Tensor, w: &Tensor, p: ConvParams) -> Result<Tensor> {
        self.conv_macs += conv::conv_macs(x.shape(), w.shape(), p);
        finite(conv::conv2d(x, w, p)?, "conv2d")
    }
    fn bias_add(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bv = g.constant(b.clone());
        let y = g.bias_add(xv, bv)?;
        Ok(g.value(y).clone())
    }
    fn elu(&mut self, x: &Tensor) -> Result<Tensor> {
        finite(graph::elu_tensor(x), "elu")
    }
    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        finite(graph::sigmoid_tensor(x), "sigmoid")
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        finite(a.add(b)?, "add")
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        finite(a.sub(b)?, "sub")
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        finite(a.mul(b)?, "mul")
    }
    fn scale(&mut self, x: &Tensor, k: f32) -> Result<Tensor> {
        finite(x.scale(k), "scale")
    }
    fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        tensor::concat_channels(parts)
    }
    fn clip(&mut self, x: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
        x.clip(lo, hi)
    }
    fn avg_pool(&mut self, x: &Tensor, f: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.avg_pool(v, f)?;
        Ok(g.value(y).clone())
    }
    fn nearest_up(&mut self, x: &Tensor, f: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.nearest_up(v, f)?;
        Ok(g.value(y).clone())
    }
    fn transfer(&mut self, x: &Tensor, scores: &ScoreBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.transfer(v, scores)?;
        Ok(g.value(y).clone())
    }
    fn dense(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.dense(xv, wv)?;
        Ok(g.value(y).clone())
    }
    fn conv_macs(&self) -> u64 {
        self.conv_macs
    }
}
