//! Minimal neural-network kernel: dense, LayerNorm, embedding and LSTM
//! layers with reverse-mode gradients, plus the Adam optimizer.
//!
//! Everything computes in binary64. Matrices are `ndarray::Array2<f64>`;
//! vectors such as biases are stored as `1 x D` rows.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod lstm;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use adam::{Adam, AdamConfig};
pub use graph::{mse, Gradients, Graph, Var};
pub use lstm::{Mat, SeqLayout};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

pub type ParamGrads = BTreeMap<String, Mat>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::validation(None, format!("parameter {name:?} registered twice")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }
}

/// Uniform `(-bound, bound)` initialization with `bound = 1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn init_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Registers a dense layer `{prefix}.weight` (`din x dout`) and `{prefix}.bias`.
pub fn init_linear<R: Rng>(params: &mut ParamSet, rng: &mut R, prefix: &str, din: usize, dout: usize) -> Result<()> {
    params.insert(format!("{prefix}.weight"), init_uniform(rng, din, dout, din))?;
    params.insert(format!("{prefix}.bias"), init_uniform(rng, 1, dout, din))?;
    Ok(())
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Array2::ones((1, dim)))?;
    params.insert(format!("{prefix}.beta"), Array2::zeros((1, dim)))?;
    Ok(())
}

/// One LSTM direction. Gate blocks are ordered input, forget, candidate, output.
pub fn init_lstm<R: Rng>(params: &mut ParamSet, rng: &mut R, prefix: &str, din: usize, hidden: usize) -> Result<()> {
    params.insert(format!("{prefix}.w_ih"), init_uniform(rng, din, 4 * hidden, din))?;
    params.insert(format!("{prefix}.w_hh"), init_uniform(rng, hidden, 4 * hidden, hidden))?;
    let mut bias = Array2::zeros((1, 4 * hidden));
    bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
    params.insert(format!("{prefix}.bias"), bias)?;
    Ok(())
}

fn lstm_prefix(prefix: &str, layer: usize, dir: Direction) -> String {
    let d = match dir {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    };
    format!("{prefix}.l{layer}.{d}")
}

pub fn init_bilstm<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    din: usize,
    hidden: usize,
    layers: usize,
) -> Result<()> {
    for layer in 0..layers {
        let input = if layer == 0 { din } else { 2 * hidden };
        for dir in [Direction::Forward, Direction::Backward] {
            init_lstm(params, rng, &lstm_prefix(prefix, layer, dir), input, hidden)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Graph builders for the composite layers.
impl Graph {
    pub fn linear(&mut self, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"), params)?;
        let b = self.param(&format!("{prefix}.bias"), params)?;
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn layer_norm_named(&mut self, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"), params)?;
        let beta = self.param(&format!("{prefix}.beta"), params)?;
        self.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    pub fn lstm_named(
        &mut self,
        params: &ParamSet,
        prefix: &str,
        x: Var,
        layout: &SeqLayout,
        dir: Direction,
    ) -> Result<Var> {
        let w_ih = self.param(&format!("{prefix}.w_ih"), params)?;
        let w_hh = self.param(&format!("{prefix}.w_hh"), params)?;
        let bias = self.param(&format!("{prefix}.bias"), params)?;
        self.lstm(x, w_ih, w_hh, bias, layout, dir == Direction::Backward)
    }

    /// Stacked bidirectional LSTM; each layer's output is the forward
    /// hidden states followed by the backward ones.
    pub fn bilstm_stack(
        &mut self,
        params: &ParamSet,
        prefix: &str,
        x: Var,
        layout: &SeqLayout,
        layers: usize,
    ) -> Result<Var> {
        let mut h = x;
        for layer in 0..layers {
            let f = self.lstm_named(
                params,
                &lstm_prefix(prefix, layer, Direction::Forward),
                h,
                layout,
                Direction::Forward,
            )?;
            let b = self.lstm_named(
                params,
                &lstm_prefix(prefix, layer, Direction::Backward),
                h,
                layout,
                Direction::Backward,
            )?;
            h = self.concat_cols(f, b)?;
        }
        Ok(h)
    }
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(Error::shape(format!("linear {:?} x {:?} + [{}]", x.dim(), w.dim(), b.len())));
    }
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    Ok(out)
}

pub fn layernorm_forward(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Mat> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gv = g.input(Array2::from_shape_vec((1, gamma.len()), gamma.to_vec()).expect("row"));
    let bv = g.input(Array2::from_shape_vec((1, beta.len()), beta.to_vec()).expect("row"));
    let out = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(out).clone())
}

pub fn embedding_lookup(table: &Mat, indexes: &[usize]) -> Result<Mat> {
    let mut g = Graph::new();
    let t = g.input(table.clone());
    let out = g.embedding(t, indexes)?;
    Ok(g.value(out).clone())
}

/// LSTM weights for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Mat,
    pub w_hh: Mat,
    pub bias: Mat,
}

impl LstmParams {
    pub fn zeros(din: usize, hidden: usize) -> Self {
        Self {
            w_ih: Mat::zeros((din, 4 * hidden)),
            w_hh: Mat::zeros((hidden, 4 * hidden)),
            bias: Mat::zeros((1, 4 * hidden)),
        }
    }
}

/// Runs one LSTM direction over a single `T x Din` sequence.
pub fn lstm_forward(x: &Mat, p: &LstmParams, dir: Direction) -> Result<Mat> {
    let layout = SeqLayout::single(x.nrows());
    lstm::check_shapes(x, &p.w_ih, &p.w_hh, &p.bias, &layout)?;
    Ok(lstm::forward(x, &p.w_ih, &p.w_hh, &p.bias, &layout, dir == Direction::Backward).0)
}

/// Stacked bidirectional LSTM over a single sequence; `layers[n]` holds the
/// forward and backward weights of layer `n`.
pub fn bilstm_stack_forward(x: &Mat, layers: &[(LstmParams, LstmParams)]) -> Result<Mat> {
    let mut h = x.clone();
    for (fwd, bwd) in layers {
        let f = lstm_forward(&h, fwd, Direction::Forward)?;
        let b = lstm_forward(&h, bwd, Direction::Backward)?;
        h = ndarray::concatenate(ndarray::Axis(1), &[f.view(), b.view()]).expect("same rows");
    }
    Ok(h)
}

/// Mean of the rows of `h` selected by `mask`.
pub fn masked_mean_pool(h: &Mat, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != h.nrows() {
        return Err(Error::shape(format!("mask of {} for {} rows", mask.len(), h.nrows())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Domain("mean pool over an all-false mask".into()));
    }
    let mut acc = vec![0.0; h.ncols()];
    for (row, _) in h.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    mse(pred, target)
}
