use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::conv::{conv_backward_raw, conv_forward_raw};
use crate::error::{Error, Result};
use crate::math::{ln, powf, sigmoid, tanh};
use crate::rulebook::Rulebook;

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::new(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn shape_of(shape: &[usize]) -> (usize, usize) {
        match shape {
            [] => (1, 1),
            [n] => (1, *n),
            [.., last] => (shape.iter().product::<usize>() / last.max(&1), *last),
        }
    }
}

/// Elementwise nonlinearity. All variants map 0 to 0, so inactive sites stay
/// zero when a dense replica is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tanh(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = tanh(x);
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        rb: Arc<Rulebook>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Act(Var, Activation),
    Concat(Vec<Var>),
    SelectCol(Var, usize),
    MeanMax(Var),
    GatherRows {
        x: Var,
        rows: Arc<[usize]>,
    },
    Scatter {
        x: Var,
        map: Arc<[(usize, usize, usize)]>,
    },
    Sum(Var),
    Focal {
        logits: Var,
        labels: Arc<[f64]>,
        alpha: f64,
        gamma: f64,
    },
    SmoothL1 {
        x: Var,
        target: Arc<[f64]>,
        row_weight: Arc<[f64]>,
        beta: f64,
        norm: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

/// Records one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Probability clamp shared by every focal-loss evaluation.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-element focal loss on a logit and its derivative w.r.t. the logit.
pub(crate) fn focal_term(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(z);
    let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let clamped = p != raw;
    let q = 1.0 - p;
    let pos = -alpha * powf(q, gamma) * ln(p);
    let neg = -(1.0 - alpha) * powf(p, gamma) * ln(q);
    let loss = y * pos + (1.0 - y) * neg;
    if clamped {
        return (loss, 0.0);
    }
    // d/dp of each branch, then chain through dp/dz = p q
    let mut dpos = -alpha * powf(q, gamma) / p;
    let mut dneg = (1.0 - alpha) * powf(p, gamma) / q;
    if gamma != 0.0 {
        dpos += alpha * gamma * powf(q, gamma - 1.0) * ln(p);
        dneg -= (1.0 - alpha) * gamma * powf(p, gamma - 1.0) * ln(q);
    }
    (loss, (y * dpos + (1.0 - y) * dneg) * p * q)
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (a - 0.5 * beta, d.signum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant)
    }

    /// Leaf copy of a stored parameter. The last dimension becomes the column
    /// count; a conv weight `[slots, c_in, c_out]` is `(slots * c_in) x c_out`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let (rows, cols) = Mat::shape_of(store.shape(id));
        self.push(Mat::new(rows, cols, store.get(id).to_vec()), Op::Param(id))
    }

    /// Sparse convolution of the rows of `x` under `rb`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, rb: Arc<Rulebook>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let c_in = xv.cols;
        let c_out = wv.cols;
        assert_eq!(xv.rows, rb.n_in, "conv input rows vs rulebook");
        assert_eq!(wv.rows, rb.kernel.volume() * c_in, "conv weight rows");
        let bias = b.map(|b| {
            let bv = self.value(b);
            assert_eq!(bv.data.len(), c_out, "conv bias length");
            bv.data.as_slice()
        });
        let out = conv_forward_raw(&xv.data, &rb, &wv.data, bias, c_in, c_out);
        let m = Mat::new(rb.n_out(), c_out, out);
        self.push(m, Op::Conv { x, w, b, rb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let m = Mat::new(av.rows, av.cols, data);
        self.push(m, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let m = Mat::new(av.rows, av.cols, data);
        self.push(m, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let m = Mat::new(av.rows, av.cols, av.data.iter().map(|x| x * c).collect());
        self.push(m, Op::Scale(a, c))
    }

    /// Multiplies each row of `x` by the matching entry of the column `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.cols, 1, "row scale must be a column");
        assert_eq!(sv.rows, xv.rows, "row scale length");
        let mut data = xv.data.clone();
        for (r, row) in data.chunks_exact_mut(xv.cols.max(1)).enumerate() {
            let k = sv.data[r];
            row.iter_mut().for_each(|v| *v *= k);
        }
        let m = Mat::new(xv.rows, xv.cols, data);
        self.push(m, Op::ScaleRows { x, s })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = Mat::new(av.rows, av.cols, av.data.iter().map(|&x| sigmoid(x)).collect());
        self.push(m, Op::Sigmoid(a))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let av = self.value(a);
        let m = Mat::new(av.rows, av.cols, av.data.iter().map(|&x| act.apply(x)).collect());
        self.push(m, Op::Act(a, act))
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat row count");
                data.extend_from_slice(pv.row(r));
            }
        }
        self.push(Mat::new(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    pub fn select_col(&mut self, x: Var, j: usize) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.data[r * xv.cols + j]).collect();
        let m = Mat::new(xv.rows, 1, data);
        self.push(m, Op::SelectCol(x, j))
    }

    /// Per-row `[mean, max]` over all columns. Max ties resolve to the lowest column.
    pub fn mean_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.rows * 2);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let (mean, max) = mean_max_row(row);
            data.push(mean);
            data.push(max);
        }
        let m = Mat::new(xv.rows, 2, data);
        self.push(m, Op::MeanMax(x))
    }

    /// Output row `r` is input row `rows[r]`.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols);
        for &r in rows.iter() {
            data.extend_from_slice(xv.row(r));
        }
        let m = Mat::new(rows.len(), xv.cols, data);
        self.push(m, Op::GatherRows { x, rows })
    }

    /// Writes each input row `src` into output row `dst` at column offset `off`.
    pub fn scatter(&mut self, x: Var, map: Arc<[(usize, usize, usize)]>, out_rows: usize, out_cols: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols;
        let mut data = vec![0.0; out_rows * out_cols];
        for &(src, dst, off) in map.iter() {
            let o = dst * out_cols + off;
            data[o..o + c].copy_from_slice(xv.row(src));
        }
        self.push(Mat::new(out_rows, out_cols, data), Op::Scatter { x, map })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    /// Mean focal loss of a logit column against `labels` (0 for an empty column).
    pub fn focal(&mut self, logits: Var, labels: Arc<[f64]>, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.data.len(), labels.len(), "focal labels length");
        let n = labels.len();
        let total: f64 = lv
            .data
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
            .sum();
        let v = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Mat::scalar(v),
            Op::Focal {
                logits,
                labels,
                alpha,
                gamma,
            },
        )
    }

    /// `sum_r row_weight[r] * sum_j smoothL1(x[r,j] - target[r,j]) / norm`.
    pub fn smooth_l1(&mut self, x: Var, target: Arc<[f64]>, row_weight: Arc<[f64]>, beta: f64, norm: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), target.len(), "smooth l1 target length");
        assert_eq!(xv.rows, row_weight.len(), "smooth l1 weights length");
        let mut total = 0.0;
        for r in 0..xv.rows {
            let w = row_weight[r];
            if w == 0.0 {
                continue;
            }
            for j in 0..xv.cols {
                let k = r * xv.cols + j;
                total += w * smooth_l1(xv.data[k] - target[k], beta).0;
            }
        }
        self.push(
            Mat::scalar(total / norm),
            Op::SmoothL1 {
                x,
                target,
                row_weight,
                beta,
                norm,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::Conv { x, w, b, rb } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let cg = conv_backward_raw(&g.data, &xv.data, rb, &wv.data, xv.cols, wv.cols);
                    accumulate(&mut grads, *x, xv.rows, xv.cols, &cg.grad_x);
                    accumulate(&mut grads, *w, wv.rows, wv.cols, &cg.grad_w);
                    if let Some(b) = b {
                        let bv = self.value(*b);
                        accumulate(&mut grads, *b, bv.rows, bv.cols, &cg.grad_bias);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.rows, g.cols, &g.data);
                    accumulate(&mut grads, *b, g.rows, g.cols, &g.data);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, g.rows, g.cols, &ga);
                    accumulate(&mut grads, *b, g.rows, g.cols, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.data.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, g.rows, g.cols, &ga);
                }
                Op::ScaleRows { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let c = xv.cols;
                    let mut gx = g.data.clone();
                    let mut gs = vec![0.0; sv.rows];
                    for r in 0..xv.rows {
                        let k = sv.data[r];
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g.data[r * c + j] * xv.data[r * c + j];
                            gx[r * c + j] *= k;
                        }
                        gs[r] = acc;
                    }
                    accumulate(&mut grads, *x, xv.rows, c, &gx);
                    accumulate(&mut grads, *s, sv.rows, 1, &gs);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let ga: Vec<f64> = g.data.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, g.rows, g.cols, &ga);
                }
                Op::Act(a, act) => {
                    let x = &self.value(*a).data;
                    let ga: Vec<f64> = g.data.iter().zip(x).map(|(g, &x)| g * act.derivative(x)).collect();
                    accumulate(&mut grads, *a, g.rows, g.cols, &ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut gp = Vec::with_capacity(pv.data.len());
                        for r in 0..pv.rows {
                            gp.extend_from_slice(&g.data[r * g.cols + off..r * g.cols + off + pv.cols]);
                        }
                        accumulate(&mut grads, p, pv.rows, pv.cols, &gp);
                        off += pv.cols;
                    }
                }
                Op::SelectCol(x, j) => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.data.len()];
                    for r in 0..xv.rows {
                        gx[r * xv.cols + j] = g.data[r];
                    }
                    accumulate(&mut grads, *x, xv.rows, xv.cols, &gx);
                }
                Op::MeanMax(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut gx = vec![0.0; xv.data.len()];
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let gm = g.data[2 * r] / c as f64;
                        for v in &mut gx[r * c..(r + 1) * c] {
                            *v = gm;
                        }
                        gx[r * c + argmax(row)] += g.data[2 * r + 1];
                    }
                    accumulate(&mut grads, *x, xv.rows, c, &gx);
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut gx = vec![0.0; xv.data.len()];
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g.data[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, xv.rows, c, &gx);
                }
                Op::Scatter { x, map } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut gx = vec![0.0; xv.data.len()];
                    for &(src, dst, off) in map.iter() {
                        let o = dst * g.cols + off;
                        for j in 0..c {
                            gx[src * c + j] += g.data[o + j];
                        }
                    }
                    accumulate(&mut grads, *x, xv.rows, c, &gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let gx = vec![g.data[0]; xv.data.len()];
                    accumulate(&mut grads, *x, xv.rows, xv.cols, &gx);
                }
                Op::Focal {
                    logits,
                    labels,
                    alpha,
                    gamma,
                } => {
                    let lv = self.value(*logits);
                    let n = labels.len().max(1) as f64;
                    let gx: Vec<f64> = lv
                        .data
                        .iter()
                        .zip(labels.iter())
                        .map(|(&z, &y)| g.data[0] * focal_term(z, y, *alpha, *gamma).1 / n)
                        .collect();
                    accumulate(&mut grads, *logits, lv.rows, lv.cols, &gx);
                }
                Op::SmoothL1 {
                    x,
                    target,
                    row_weight,
                    beta,
                    norm,
                } => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.data.len()];
                    for r in 0..xv.rows {
                        let w = row_weight[r];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..xv.cols {
                            let k = r * xv.cols + j;
                            gx[k] = g.data[0] * w * smooth_l1(xv.data[k] - target[k], *beta).1 / norm;
                        }
                    }
                    accumulate(&mut grads, *x, xv.rows, xv.cols, &gx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of every parameter leaf in `store`, summed over all leaves
    /// referring to the same parameter. Unreached parameters get zeros.
    pub fn param_grads(&self, grads: &NodeGrads, store: &ParamStore) -> Gradients {
        let mut out: Vec<Vec<f64>> = store.values().iter().map(|v| vec![0.0; v.len()]).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    for (o, v) in out[id.0].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
            }
        }
        Gradients(out)
    }
}

fn mean_max_row(row: &[f64]) -> (f64, f64) {
    if row.is_empty() {
        return (0.0, 0.0);
    }
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    (mean, row[argmax(row)])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize, g: &[f64]) {
    match &mut grads[v.0] {
        Some(m) => {
            for (a, b) in m.data.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Mat::new(rows, cols, g.to_vec())),
    }
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct NodeGrads {
    grads: Vec<Option<Mat>>,
}

impl NodeGrads {
    /// Gradient w.r.t. a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Gradients per parameter, indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn as_slice(&self) -> &[Vec<f64>] {
        &self.0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    /// Elementwise `self += other * k`.
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_rel_error};
    use crate::rulebook::{build_rulebook, ConvMode, Kernel};
    use crate::sparse::{Coord, SparseTensor};
    use alloc::vec;

    fn store_with(vals: Vec<f64>, shape: Vec<usize>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", shape, vals).unwrap();
        (s, id)
    }

    #[test]
    fn sum_grad_is_ones() {
        let (s, id) = store_with(vec![1.0, -2.0, 3.0], vec![3]);
        let mut t = Tape::new();
        let p = t.param(&s, id);
        let l = t.sum(p);
        let g = t.param_grads(&t.backward(l).unwrap(), &s);
        assert_eq!(g.get(id), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_grad_is_p() {
        let (s, id) = store_with(vec![1.5, -2.0], vec![2]);
        let mut t = Tape::new();
        let p = t.param(&s, id);
        let q = t.mul(p, p);
        let h = t.sum(q);
        let l = t.scale(h, 0.5);
        let g = t.param_grads(&t.backward(l).unwrap(), &s);
        assert_eq!(g.get(id), &[1.5, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let c = t.constant(Mat::zeros(2, 1));
        assert_eq!(t.backward(c).unwrap_err(), Error::NonScalarLoss { rows: 2, cols: 1 });
    }

    #[test]
    fn unreached_param_zero() {
        let mut s = ParamStore::new();
        let a = s.add("a", vec![2], vec![1.0, 2.0]).unwrap();
        let b = s.add("b", vec![1], vec![5.0]).unwrap();
        let mut t = Tape::new();
        let pa = t.param(&s, a);
        let l = t.sum(pa);
        let g = t.param_grads(&t.backward(l).unwrap(), &s);
        assert_eq!(g.get(b), &[0.0]);
    }

    #[test]
    fn max_tie_goes_to_lowest_channel() {
        let (s, id) = store_with(vec![3.0, 1.0, 3.0], vec![1, 3]);
        let mut t = Tape::new();
        let p = t.param(&s, id);
        let mm = t.mean_max(p);
        let mx = t.select_col(mm, 1);
        let l = t.sum(mx);
        let g = t.param_grads(&t.backward(l).unwrap(), &s);
        assert_eq!(g.get(id), &[1.0, 0.0, 0.0]);
    }

    /// Composite of every primitive, checked against central differences.
    #[test]
    fn primitives_match_finite_differences() {
        let coords = vec![Coord::new(0, 0, 0), Coord::new(1, 0, 0), Coord::new(1, 1, 0), Coord::new(2, 2, 1)];
        let x = SparseTensor::new([3, 3, 2], 2, coords, vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9, 0.5, 0.05]).unwrap();
        let rb = Arc::new(build_rulebook(&x, Kernel::cube(3), ConvMode::Submanifold).unwrap());
        let mut store = ParamStore::new();
        let wv: Vec<f64> = (0..27 * 2 * 3).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let w = store.add("w", vec![27, 2, 3], wv).unwrap();
        let b = store.add("b", vec![3], vec![0.1, -0.2, 0.05]).unwrap();
        let xin = store.add("x", vec![4, 2], x.features().to_vec()).unwrap();
        let labels: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 1.0, 0.0]);
        let target: Arc<[f64]> = Arc::from(vec![0.2; 4 * 6]);
        let weights: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 2.0, 1.0]);
        let loss = |store: &ParamStore| {
            let mut t = Tape::new();
            let xv = t.param(store, xin);
            let wv = t.param(store, w);
            let bv = t.param(store, b);
            let y = t.conv(xv, wv, Some(bv), rb.clone());
            let y = t.activate(y, Activation::Silu);
            let s = t.sigmoid(y);
            let mm = t.mean_max(s);
            let col = t.select_col(mm, 0);
            let scaled = t.scale_rows(y, col);
            let cat = t.concat(&[scaled, y]);
            let th = t.activate(cat, Activation::Tanh);
            let g = t.gather_rows(th, Arc::from(vec![0usize, 2, 3, 1]));
            let focal = t.select_col(g, 1);
            let lf = t.focal(focal, labels.clone(), 0.25, 2.0);
            let ls = t.smooth_l1(g, target.clone(), weights.clone(), 1.0 / 9.0, 3.0);
            let sc = t.scatter(y, Arc::from(vec![(0usize, 0usize, 0usize), (3, 0, 3), (1, 1, 0)]), 2, 6);
            let sq = t.mul(sc, sc);
            let lq = t.sum(sq);
            let a = t.add(lf, ls);
            let lq = t.scale(lq, 0.1);
            let total = t.add(a, lq);
            (t, total)
        };
        let (t, l) = loss(&store);
        let analytic = t.param_grads(&t.backward(l).unwrap(), &store).flatten();
        let base = store.flatten();
        let numeric = finite_diff(
            |p| {
                let mut s2 = store.clone();
                s2.assign_flat(p).unwrap();
                let (t, l) = loss(&s2);
                t.value(l).item()
            },
            &base,
            1e-6,
        );
        let err = max_rel_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn focal_term_gradient() {
        for &(z, y) in &[(0.3, 1.0), (-1.2, 0.0), (2.0, 0.0), (-0.4, 1.0)] {
            let num = (focal_term(z + 1e-6, y, 0.25, 2.0).0 - focal_term(z - 1e-6, y, 0.25, 2.0).0) / 2e-6;
            let ana = focal_term(z, y, 0.25, 2.0).1;
            assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-3), "{z} {y}: {num} vs {ana}");
        }
    }
}
