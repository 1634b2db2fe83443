//! Batched LSTM kernel over time-major packed sequences.
//!
//! Rows of a packed matrix are laid out as `t * batch + b`. Rows past a
//! sequence's length are padding: they produce zero output and receive no
//! gradient. The backward direction reverses each sequence within its own
//! length, so padding never leaks into real frames.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Lengths of the sequences packed into one time-major matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    lengths: Vec<usize>,
    max_len: usize,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::shape("sequence layout needs at least one sequence"));
        }
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        Ok(Self { lengths, max_len })
    }

    pub fn single(len: usize) -> Self {
        Self { lengths: vec![len], max_len: len }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rows(&self) -> usize {
        self.max_len * self.lengths.len()
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.lengths.len() + b
    }

    /// Row-wise validity mask: true for real frames, false for padding.
    pub fn mask(&self) -> Vec<bool> {
        let batch = self.batch();
        (0..self.rows()).map(|r| r / batch < self.lengths[r % batch]).collect()
    }

    /// Reverses every sequence within its own length; padding rows become zero.
    pub fn reverse_within(&self, m: &Mat) -> Mat {
        let batch = self.batch();
        let mut out = Mat::zeros(m.raw_dim());
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                out.row_mut(t * batch + b).assign(&m.row((len - 1 - t) * batch + b));
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Values retained from the forward pass for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    /// Input in processing order.
    inputs: Mat,
    /// Activated gates `[i f g o]`, `rows x 4H`.
    gates: Mat,
    cells: Mat,
    tanh_cells: Mat,
    hidden: Mat,
}

pub(crate) fn check_shapes(x: &Mat, w_ih: &Mat, w_hh: &Mat, bias: &Mat, layout: &SeqLayout) -> Result<usize> {
    let hidden = w_hh.nrows();
    if w_hh.ncols() != 4 * hidden || w_ih.ncols() != 4 * hidden || bias.dim() != (1, 4 * hidden) {
        return Err(Error::shape(format!(
            "lstm weights inconsistent: w_ih {:?}, w_hh {:?}, bias {:?}",
            w_ih.dim(),
            w_hh.dim(),
            bias.dim()
        )));
    }
    if x.ncols() != w_ih.nrows() {
        return Err(Error::shape(format!("lstm input width {} != {}", x.ncols(), w_ih.nrows())));
    }
    if x.nrows() != layout.rows() {
        return Err(Error::shape(format!("lstm input has {} rows, layout needs {}", x.nrows(), layout.rows())));
    }
    Ok(hidden)
}

pub(crate) fn forward(
    x: &Mat,
    w_ih: &Mat,
    w_hh: &Mat,
    bias: &Mat,
    layout: &SeqLayout,
    reverse: bool,
) -> (Mat, LstmCache) {
    let h = w_hh.nrows();
    let batch = layout.batch();
    let rows = layout.rows();
    let inputs = if reverse { layout.reverse_within(x) } else { x.clone() };
    let mut gates = inputs.dot(w_ih);
    gates += bias;
    let mut cells = Mat::zeros((rows, h));
    let mut tanh_cells = Mat::zeros((rows, h));
    let mut hidden = Mat::zeros((rows, h));
    let mut h_prev = Mat::zeros((batch, h));
    let mut c_prev = Mat::zeros((batch, h));

    for t in 0..layout.max_len() {
        let r0 = t * batch;
        let recur = h_prev.dot(w_hh);
        for b in 0..batch {
            let r = r0 + b;
            let mut grow = gates.row_mut(r);
            let g = grow.as_slice_mut().expect("contiguous gates");
            if t >= layout.lengths()[b] {
                g.iter_mut().for_each(|v| *v = 0.0);
                h_prev.row_mut(b).fill(0.0);
                c_prev.row_mut(b).fill(0.0);
                continue;
            }
            let rec = recur.row(b);
            let rec = rec.as_slice().expect("contiguous");
            for (v, r) in g.iter_mut().zip(rec) {
                *v += r;
            }
            let (gi, rest) = g.split_at_mut(h);
            let (gf, rest) = rest.split_at_mut(h);
            let (gg, go) = rest.split_at_mut(h);
            let mut crow = cells.row_mut(r);
            let mut tcrow = tanh_cells.row_mut(r);
            let mut hrow = hidden.row_mut(r);
            let cp = c_prev.row(b).to_owned();
            for j in 0..h {
                let i = sigmoid(gi[j]);
                let f = sigmoid(gf[j]);
                let cand = gg[j].tanh();
                let o = sigmoid(go[j]);
                gi[j] = i;
                gf[j] = f;
                gg[j] = cand;
                go[j] = o;
                let c = f * cp[j] + i * cand;
                let tc = c.tanh();
                crow[j] = c;
                tcrow[j] = tc;
                hrow[j] = o * tc;
            }
            h_prev.row_mut(b).assign(&hrow);
            c_prev.row_mut(b).assign(&crow);
        }
    }

    let out = if reverse { layout.reverse_within(&hidden) } else { hidden.clone() };
    (out, LstmCache { inputs, gates, cells, tanh_cells, hidden })
}

pub(crate) struct LstmGrads {
    pub x: Mat,
    pub w_ih: Mat,
    pub w_hh: Mat,
    pub bias: Mat,
}

pub(crate) fn backward(
    d_out: &Mat,
    w_ih: &Mat,
    w_hh: &Mat,
    layout: &SeqLayout,
    reverse: bool,
    cache: &LstmCache,
) -> LstmGrads {
    let h = w_hh.nrows();
    let batch = layout.batch();
    let rows = layout.rows();
    let d_hidden = if reverse { layout.reverse_within(d_out) } else { d_out.clone() };
    let mut d_pre = Mat::zeros((rows, 4 * h));
    let mut dh_next = Mat::zeros((batch, h));
    let mut dc_next = Mat::zeros((batch, h));
    let w_hh_t = w_hh.t();

    for t in (0..layout.max_len()).rev() {
        let r0 = t * batch;
        for b in 0..batch {
            let r = r0 + b;
            if t >= layout.lengths()[b] {
                dc_next.row_mut(b).fill(0.0);
                continue;
            }
            let g = cache.gates.row(r);
            let g = g.as_slice().expect("contiguous");
            let (gi, rest) = g.split_at(h);
            let (gf, rest) = rest.split_at(h);
            let (gg, go) = rest.split_at(h);
            let tc = cache.tanh_cells.row(r);
            let mut dp = d_pre.row_mut(r);
            let dp = dp.as_slice_mut().expect("contiguous");
            for j in 0..h {
                let c_prev = if t > 0 { cache.cells[[r - batch, j]] } else { 0.0 };
                let dh = d_hidden[[r, j]] + dh_next[[b, j]];
                let d_o = dh * tc[j];
                let dc = dc_next[[b, j]] + dh * go[j] * (1.0 - tc[j] * tc[j]);
                let d_i = dc * gg[j];
                let d_g = dc * gi[j];
                let d_f = dc * c_prev;
                dc_next[[b, j]] = dc * gf[j];
                dp[j] = d_i * gi[j] * (1.0 - gi[j]);
                dp[h + j] = d_f * gf[j] * (1.0 - gf[j]);
                dp[2 * h + j] = d_g * (1.0 - gg[j] * gg[j]);
                dp[3 * h + j] = d_o * go[j] * (1.0 - go[j]);
            }
        }
        let step = d_pre.slice(s![r0..r0 + batch, ..]);
        dh_next = step.dot(&w_hh_t);
    }

    // h_{t-1} for every row, zero at t = 0
    let mut h_prev = Mat::zeros((rows, h));
    if layout.max_len() > 1 {
        h_prev.slice_mut(s![batch.., ..]).assign(&cache.hidden.slice(s![..rows - batch, ..]));
    }
    let d_w_hh = h_prev.t().dot(&d_pre);
    let d_w_ih = cache.inputs.t().dot(&d_pre);
    let d_bias = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dx_proc = d_pre.dot(&w_ih.t());
    let x = if reverse { layout.reverse_within(&dx_proc) } else { dx_proc };
    LstmGrads { x, w_ih: d_w_ih, w_hh: d_w_hh, bias: d_bias }
}
