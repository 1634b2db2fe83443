//! Reverse-mode differentiation over a tape of coarse matrix operations.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use super::lstm::{self, LstmCache, Mat, SeqLayout};
use super::ParamSet;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    ConcatCols(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Mat, inv_std: Vec<f64> },
    Embedding { table: Var, indexes: Vec<usize> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, layout: SeqLayout, reverse: bool, cache: Box<LstmCache> },
    MaskedMeanPool { x: Var, layout: SeqLayout },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(self.shapes[v.0]))
    }

    /// Gradients keyed by parameter name, for every registered parameter.
    pub fn params(&self) -> BTreeMap<String, Mat> {
        self.params.iter().map(|(name, &v)| (name.clone(), self.wrt(v))).collect()
    }
}

fn same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named parameter; registering the same name twice returns
    /// the original handle.
    pub fn param(&mut self, name: &str, params: &ParamSet) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value =
            params.get(name).ok_or_else(|| Error::validation(None, format!("unknown parameter {name:?}")))?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(b));
        if x.ncols() != w.nrows() {
            return Err(Error::shape(format!("matmul {:?} x {:?}", x.dim(), w.dim())));
        }
        let out = x.dot(w);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x D` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(Error::shape(format!("row broadcast {:?} onto {:?}", rv.dim(), xv.dim())));
        }
        let out = xv + rv;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return Err(Error::shape(format!("concat rows {} vs {}", av.nrows(), bv.nrows())));
        }
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("row counts match");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(lstm::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Per-row normalization with population variance, then affine `gamma`, `beta` (both `1 x D`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.ncols();
        if d == 0 {
            return Err(Error::shape("layer norm over zero features"));
        }
        for p in [gamma, beta] {
            if self.value(p).dim() != (1, d) {
                return Err(Error::shape(format!("layer norm affine {:?} for width {d}", self.value(p).dim())));
            }
        }
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let mut out = &normed * self.value(gamma);
        out += self.value(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, normed, inv_std }))
    }

    pub fn embedding(&mut self, table: Var, indexes: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let k = tv.nrows();
        if let Some(&bad) = indexes.iter().find(|&&i| i >= k) {
            return Err(Error::Domain(format!("embedding index {bad} outside [0, {k})")));
        }
        let mut out = Array2::zeros((indexes.len(), tv.ncols()));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indexes) {
            row.assign(&tv.row(i));
        }
        Ok(self.push(out, Op::Embedding { table, indexes: indexes.to_vec() }))
    }

    /// Single-direction LSTM over packed sequences; `reverse` runs each
    /// sequence backwards in time and re-reverses the outputs.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, layout: &SeqLayout, reverse: bool) -> Result<Var> {
        let (xv, wi, wh, bv) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(bias));
        lstm::check_shapes(xv, wi, wh, bv, layout)?;
        let (out, cache) = lstm::forward(xv, wi, wh, bv, layout, reverse);
        Ok(self.push(out, Op::Lstm { x, w_ih, w_hh, bias, layout: layout.clone(), reverse, cache: Box::new(cache) }))
    }

    /// Mean over the real (unpadded) rows of each sequence: `batch x D`.
    pub fn masked_mean_pool(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() != layout.rows() {
            return Err(Error::shape(format!("pool input has {} rows, layout needs {}", xv.nrows(), layout.rows())));
        }
        if let Some(b) = layout.lengths().iter().position(|&l| l == 0) {
            return Err(Error::Domain(format!("sequence {b} has an all-false mask")));
        }
        let batch = layout.batch();
        let mut out = Array2::zeros((batch, xv.ncols()));
        for (b, &len) in layout.lengths().iter().enumerate() {
            let mut acc = out.row_mut(b);
            for t in 0..len {
                acc += &xv.row(t * batch + b);
            }
            acc /= len as f64;
        }
        Ok(self.push(out, Op::MaskedMeanPool { x, layout: layout.clone() }))
    }

    /// Mean squared error of a `B x 1` prediction against `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.ncols() != 1 || pv.nrows() != target.len() || target.is_empty() {
            return Err(Error::shape(format!("mse over {:?} predictions and {} targets", pv.dim(), target.len())));
        }
        let loss = mse(&pv.column(0).to_vec(), target)?;
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target: target.to_vec() }))
    }

    /// Backpropagates from the scalar `loss` through every recorded op.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::validation(None, "backward called before the forward pass recorded the loss"));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).dim())));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    let (ga, gb) = g.view().split_at(Axis(1), split);
                    accumulate(&mut grads, *a, ga.to_owned());
                    accumulate(&mut grads, *b, gb.to_owned());
                }
                Op::Tanh(x) => {
                    let dx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                    let gv = self.value(*gamma);
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *gamma, (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let d = normed.ncols() as f64;
                    let mut dx = &g * gv;
                    for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(normed.rows()).zip(inv_std) {
                        let mean_g = row.sum() / d;
                        let mean_gx = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for (v, xh) in row.iter_mut().zip(xhat) {
                            *v = inv * (*v - mean_g - xh * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Embedding { table, indexes } => {
                    let mut dt = Mat::zeros(self.value(*table).raw_dim());
                    for (row, &i) in g.rows().into_iter().zip(indexes) {
                        let mut target = dt.row_mut(i);
                        target += &row;
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Lstm { x, w_ih, w_hh, bias, layout, reverse, cache } => {
                    let lg = lstm::backward(&g, self.value(*w_ih), self.value(*w_hh), layout, *reverse, cache);
                    accumulate(&mut grads, *x, lg.x);
                    accumulate(&mut grads, *w_ih, lg.w_ih);
                    accumulate(&mut grads, *w_hh, lg.w_hh);
                    accumulate(&mut grads, *bias, lg.bias);
                }
                Op::MaskedMeanPool { x, layout } => {
                    let batch = layout.batch();
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (b, &len) in layout.lengths().iter().enumerate() {
                        let share = &g.row(b) / len as f64;
                        for t in 0..len {
                            dx.row_mut(t * batch + b).assign(&share);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mse { pred, target } => {
                    let scale = 2.0 * g[[0, 0]] / target.len() as f64;
                    let pv = self.value(*pred);
                    let dp = Array2::from_shape_fn(pv.raw_dim(), |(i, _)| scale * (pv[[i, 0]] - target[i]));
                    accumulate(&mut grads, *pred, dp);
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes, params: self.params.clone() })
    }
}

/// Mean of squared differences.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("mse over {} predictions and {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse over an empty batch"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}
