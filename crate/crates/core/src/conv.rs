//! Gather-scatter sparse convolution driven by a [`Rulebook`], its backward
//! pass, and FLOPs accounting.
//!
//! Weights are laid out `[slot][c_in][c_out]` where `slot` indexes the kernel
//! offsets as in [`Kernel::offset`]. Accumulation always walks the rulebook in
//! canonical order (slot, then output row), so results are bitwise
//! reproducible.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rulebook::{build_rulebook, ConvMode, Kernel, Rulebook};
use crate::sparse::SparseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Kernel,
    pub mode: ConvMode,
    pub c_in: usize,
    pub c_out: usize,
    /// `kernel.volume() * c_in * c_out` values, `[slot][c_in][c_out]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvParams {
    pub fn zeros(kernel: Kernel, mode: ConvMode, c_in: usize, c_out: usize, bias: bool) -> Self {
        ConvParams {
            kernel,
            mode,
            c_in,
            c_out,
            weights: vec![0.0; kernel.volume() * c_in * c_out],
            bias: bias.then(|| vec![0.0; c_out]),
        }
    }

    /// Submanifold kernel whose center slot is the identity and every other slot zero.
    pub fn identity(k: usize, channels: usize) -> Self {
        let kernel = Kernel::cube(k);
        let mut p = Self::zeros(kernel, ConvMode::Submanifold, channels, channels, false);
        let center = kernel.center_slot().expect("odd kernel");
        for c in 0..channels {
            p.weights[(center * channels + c) * channels + c] = 1.0;
        }
        p
    }

    pub fn weight_len(&self) -> usize {
        self.kernel.volume() * self.c_in * self.c_out
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate(self.mode)?;
        if self.weights.len() != self.weight_len() {
            return Err(Error::ShapeMismatch {
                what: "conv weights",
                expected: self.weight_len(),
                got: self.weights.len(),
            });
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out {
                return Err(Error::ShapeMismatch {
                    what: "conv bias",
                    expected: self.c_out,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }
}

/// `y += a[0] r[0] + a[1] r[1] + a[2] r[2] + a[3] r[3]`.
#[inline]
fn axpy4(y: &mut [f64], a: [f64; 4], r: [&[f64]; 4]) {
    let n = y.len();
    let (r0, r1, r2, r3) = (&r[0][..n], &r[1][..n], &r[2][..n], &r[3][..n]);
    for j in 0..n {
        y[j] += a[0] * r0[j] + a[1] * r1[j] + a[2] * r2[j] + a[3] * r3[j];
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, r: &[f64]) {
    let n = y.len();
    let r = &r[..n];
    for j in 0..n {
        y[j] += a * r[j];
    }
}

/// `y += m^T v` for a row-major `m` with `v.len()` rows of width `y.len()`.
fn gemv_t(y: &mut [f64], v: &[f64], m: &[f64]) {
    let w = y.len();
    let mut r = 0;
    while r + 4 <= v.len() {
        let a = [v[r], v[r + 1], v[r + 2], v[r + 3]];
        let rows = [&m[r * w..], &m[(r + 1) * w..], &m[(r + 2) * w..], &m[(r + 3) * w..]];
        axpy4(y, a, rows);
        r += 4;
    }
    while r < v.len() {
        axpy(y, v[r], &m[r * w..]);
        r += 1;
    }
}

/// Raw forward pass over feature rows. `x` is `n_in x c_in`; the result is
/// `n_out x c_out`.
pub fn conv_forward_raw(x: &[f64], rb: &Rulebook, w: &[f64], bias: Option<&[f64]>, c_in: usize, c_out: usize) -> Vec<f64> {
    let n_out = rb.n_out();
    let mut out = vec![0.0; n_out * c_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(b);
        }
    }
    for (k, list) in rb.pairs.iter().enumerate() {
        let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
        for &(i, o) in list {
            let xi = &x[i as usize * c_in..(i as usize + 1) * c_in];
            let yo = &mut out[o as usize * c_out..(o as usize + 1) * c_out];
            gemv_t(yo, xi, wk);
        }
    }
    out
}

/// Gradients of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_x: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Transposed gather-scatter over the same rulebook.
pub fn conv_backward_raw(grad_out: &[f64], x: &[f64], rb: &Rulebook, w: &[f64], c_in: usize, c_out: usize) -> ConvGrads {
    let mut grad_x = vec![0.0; rb.n_in * c_in];
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_bias = vec![0.0; c_out];
    for row in grad_out.chunks_exact(c_out) {
        for (b, &g) in grad_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    // per-slot transpose, c_out x c_in
    let mut wt = vec![0.0; c_in * c_out];
    for (k, list) in rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
        for ci in 0..c_in {
            for co in 0..c_out {
                wt[co * c_in + ci] = wk[ci * c_out + co];
            }
        }
        for &(i, o) in list {
            let (i, o) = (i as usize, o as usize);
            let go = &grad_out[o * c_out..(o + 1) * c_out];
            gemv_t(&mut grad_x[i * c_in..(i + 1) * c_in], go, &wt);
        }
        let gwk = &mut grad_w[k * c_in * c_out..(k + 1) * c_in * c_out];
        let mut chunks = list.chunks_exact(4);
        for c in &mut chunks {
            let xs = [c[0].0, c[1].0, c[2].0, c[3].0].map(|i| &x[i as usize * c_in..(i as usize + 1) * c_in]);
            let gs = [c[0].1, c[1].1, c[2].1, c[3].1].map(|o| &grad_out[o as usize * c_out..(o as usize + 1) * c_out]);
            for ci in 0..c_in {
                let a = [xs[0][ci], xs[1][ci], xs[2][ci], xs[3][ci]];
                axpy4(&mut gwk[ci * c_out..(ci + 1) * c_out], a, gs);
            }
        }
        for &(i, o) in chunks.remainder() {
            let (i, o) = (i as usize, o as usize);
            let go = &grad_out[o * c_out..(o + 1) * c_out];
            for ci in 0..c_in {
                axpy(&mut gwk[ci * c_out..(ci + 1) * c_out], x[i * c_in + ci], go);
            }
        }
    }
    ConvGrads {
        grad_x,
        grad_w,
        grad_bias,
    }
}

fn check_input(x: &SparseTensor, p: &ConvParams) -> Result<()> {
    p.validate()?;
    if x.channels() != p.c_in {
        return Err(Error::ShapeMismatch {
            what: "conv input channels",
            expected: p.c_in,
            got: x.channels(),
        });
    }
    Ok(())
}

/// Sparse convolution. Submanifold output sites equal the input sites;
/// strided output sites follow [`build_rulebook`].
pub fn sparse_conv(x: &SparseTensor, p: &ConvParams) -> Result<SparseTensor> {
    check_input(x, p)?;
    let rb = build_rulebook(x, p.kernel, p.mode)?;
    Ok(sparse_conv_with(x, p, &rb))
}

/// Forward pass with a prebuilt rulebook. The caller guarantees `rb` was built
/// for `x` with `p`'s kernel and mode.
pub fn sparse_conv_with(x: &SparseTensor, p: &ConvParams, rb: &Rulebook) -> SparseTensor {
    let f = conv_forward_raw(x.features(), rb, &p.weights, p.bias.as_deref(), p.c_in, p.c_out);
    SparseTensor::from_canonical(rb.out_grid, p.c_out, rb.out_coords.clone(), f)
}

/// Backward pass of [`sparse_conv`] given the saved input.
pub fn conv_backward(grad_out: &SparseTensor, x: &SparseTensor, p: &ConvParams) -> Result<ConvGrads> {
    check_input(x, p)?;
    let rb = build_rulebook(x, p.kernel, p.mode)?;
    if grad_out.len() != rb.n_out() || grad_out.channels() != p.c_out {
        return Err(Error::ShapeMismatch {
            what: "conv grad_out",
            expected: rb.n_out() * p.c_out,
            got: grad_out.len() * grad_out.channels(),
        });
    }
    Ok(conv_backward_raw(grad_out.features(), x.features(), &rb, &p.weights, p.c_in, p.c_out))
}

/// FLOPs of one layer. 1 MAC = 2 FLOPs; a bias add is 1 FLOP per output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub pair_count: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub active_out: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total_pairs: u64,
    pub total_macs: u64,
    pub total_flops: u64,
}

pub fn count_flops(layers: &[(&ConvParams, &Rulebook)]) -> FlopsReport {
    let mut report = FlopsReport::default();
    for (p, rb) in layers {
        let pairs = rb.pair_count() as u64;
        let macs = pairs * p.c_in as u64 * p.c_out as u64;
        let bias = if p.bias.is_some() {
            rb.n_out() as u64 * p.c_out as u64
        } else {
            0
        };
        let l = LayerFlops {
            pair_count: pairs,
            c_in: p.c_in as u64,
            c_out: p.c_out as u64,
            active_out: rb.n_out() as u64,
            macs,
            flops: 2 * macs + bias,
        };
        report.total_pairs += l.pair_count;
        report.total_macs += l.macs;
        report.total_flops += l.flops;
        report.layers.push(l);
    }
    report
}

/// Runs a stack of convolutions, returning the per-layer rulebooks alongside
/// the FLOPs report for the actual occupancy.
pub fn profile_stack(x: &SparseTensor, stack: &[ConvParams]) -> Result<(SparseTensor, FlopsReport)> {
    let mut cur = x.clone();
    let mut rbs = Vec::with_capacity(stack.len());
    for p in stack {
        check_input(&cur, p)?;
        let rb = build_rulebook(&cur, p.kernel, p.mode)?;
        cur = sparse_conv_with(&cur, p, &rb);
        rbs.push(rb);
    }
    let layers: Vec<(&ConvParams, &Rulebook)> = stack.iter().zip(rbs.iter()).collect();
    Ok((cur, count_flops(&layers)))
}
