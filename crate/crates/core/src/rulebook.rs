//! Rulebook construction: the (input row, output row) pairs per kernel
//! offset that drive a sparse convolution.
//!
//! Offsets are centered: along an axis of size `k` they run over
//! `[-(k-1)/2, k - 1 - (k-1)/2]`. Input site `i` contributes to output site
//! `o` through offset `delta` iff `coord(i) = stride * coord(o) + dilation * delta`.
//! With stride 1 this is the submanifold relation; with stride `s` it is the
//! usual padded strided convolution with padding `dilation * (k-1)/2`.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Coord, SparseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Output site exists iff at least one input reaches it.
    Strided,
}

/// Kernel geometry. `size` may be anisotropic (the BEV head uses `[3, 3, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Kernel {
    pub size: [usize; 3],
    pub dilation: usize,
    pub stride: usize,
}

impl Kernel {
    pub const fn cube(k: usize) -> Self {
        Kernel {
            size: [k, k, k],
            dilation: 1,
            stride: 1,
        }
    }

    pub const fn new(k: usize, dilation: usize, stride: usize) -> Self {
        Kernel {
            size: [k, k, k],
            dilation,
            stride,
        }
    }

    pub const fn planar(k: usize) -> Self {
        Kernel {
            size: [k, k, 1],
            dilation: 1,
            stride: 1,
        }
    }

    pub fn volume(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }

    fn lo(&self, axis: usize) -> i64 {
        -(((self.size[axis] - 1) / 2) as i64)
    }

    /// Centered offset of flat weight slot `k` (x slowest, z fastest).
    pub fn offset(&self, k: usize) -> [i64; 3] {
        let z = k % self.size[2];
        let y = (k / self.size[2]) % self.size[1];
        let x = k / (self.size[1] * self.size[2]);
        [x as i64 + self.lo(0), y as i64 + self.lo(1), z as i64 + self.lo(2)]
    }

    /// Flat slot of the zero offset, when the kernel has one.
    pub fn center_slot(&self) -> Option<usize> {
        let c = [(self.size[0] - 1) / 2, (self.size[1] - 1) / 2, (self.size[2] - 1) / 2];
        if self.size.iter().all(|&s| s % 2 == 1) {
            Some((c[0] * self.size[1] + c[1]) * self.size[2] + c[2])
        } else {
            None
        }
    }

    pub fn validate(&self, mode: ConvMode) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::InvalidKernel("kernel size must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidKernel("dilation must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::InvalidKernel("stride must be >= 1"));
        }
        if mode == ConvMode::Submanifold {
            if self.size.iter().any(|&s| s % 2 == 0) {
                return Err(Error::InvalidKernel("submanifold kernel size must be odd"));
            }
            if self.stride != 1 {
                return Err(Error::InvalidKernel("submanifold convolution requires stride 1"));
            }
        }
        Ok(())
    }

    /// Output grid for this kernel: `ceil(grid / stride)` per axis.
    pub fn output_grid(&self, grid: [usize; 3]) -> [usize; 3] {
        let s = self.stride;
        [grid[0].div_ceil(s), grid[1].div_ceil(s), grid[2].div_ceil(s)]
    }
}

/// Per-offset `(input_row, output_row)` pair lists plus the output sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub kernel: Kernel,
    pub mode: ConvMode,
    pub in_grid: [usize; 3],
    pub out_grid: [usize; 3],
    pub n_in: usize,
    pub out_coords: Vec<Coord>,
    /// `pairs[k]` lists `(input_row, output_row)` for weight slot `k`, sorted
    /// by output row then input row.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    /// All pairs as `(input_row, output_row, slot)` in canonical order.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::with_capacity(self.pair_count());
        for (k, list) in self.pairs.iter().enumerate() {
            for &(i, o) in list {
                v.push((i as usize, o as usize, k));
            }
        }
        v
    }
}

/// Builds the rulebook for `input` under `kernel` / `mode`.
pub fn build_rulebook(input: &SparseTensor, kernel: Kernel, mode: ConvMode) -> Result<Rulebook> {
    kernel.validate(mode)?;
    let in_grid = input.grid();
    let coords = input.coords();
    let volume = kernel.volume();
    let d = kernel.dilation as i64;
    let s = kernel.stride as i64;
    let out_grid = match mode {
        ConvMode::Submanifold => in_grid,
        ConvMode::Strided => kernel.output_grid(in_grid),
    };

    let out_coords: Vec<Coord> = match mode {
        ConvMode::Submanifold => coords.to_vec(),
        ConvMode::Strided => {
            let mut set = BTreeSet::new();
            for &c in coords {
                let p = c.as_array();
                for k in 0..volume {
                    let off = kernel.offset(k);
                    let mut q = [0i64; 3];
                    let mut ok = true;
                    for a in 0..3 {
                        let num = p[a] - d * off[a];
                        if num.rem_euclid(s) != 0 {
                            ok = false;
                            break;
                        }
                        q[a] = num.div_euclid(s);
                    }
                    if ok {
                        if let Some(o) = Coord::checked(q, out_grid) {
                            set.insert(o);
                        }
                    }
                }
            }
            set.into_iter().collect()
        }
    };

    let mut pairs = vec![Vec::new(); volume];
    for (orow, &oc) in out_coords.iter().enumerate() {
        let base = oc.as_array();
        for (k, list) in pairs.iter_mut().enumerate() {
            let off = kernel.offset(k);
            let p = [base[0] * s + d * off[0], base[1] * s + d * off[1], base[2] * s + d * off[2]];
            if let Some(ic) = Coord::checked(p, in_grid) {
                if let Some(irow) = input.find(ic) {
                    list.push((irow as u32, orow as u32));
                }
            }
        }
    }

    Ok(Rulebook {
        kernel,
        mode,
        in_grid,
        out_grid,
        n_in: input.len(),
        out_coords,
        pairs,
    })
}

/// Rulebooks over one fixed active set, built on first use per kernel.
#[derive(Debug, Clone)]
pub struct RulebookCache {
    input: SparseTensor,
    entries: Vec<(Kernel, ConvMode, Arc<Rulebook>)>,
}

impl RulebookCache {
    /// Only the coordinates of `input` matter; features are dropped.
    pub fn new(input: &SparseTensor) -> Self {
        let input = SparseTensor::from_canonical(input.grid(), 0, input.coords().to_vec(), Vec::new());
        RulebookCache {
            input,
            entries: Vec::new(),
        }
    }

    pub fn input(&self) -> &SparseTensor {
        &self.input
    }

    pub fn get(&mut self, kernel: Kernel, mode: ConvMode) -> Result<Arc<Rulebook>> {
        if let Some((_, _, rb)) = self.entries.iter().find(|(k, m, _)| *k == kernel && *m == mode) {
            return Ok(rb.clone());
        }
        let rb = Arc::new(build_rulebook(&self.input, kernel, mode)?);
        self.entries.push((kernel, mode, rb.clone()));
        Ok(rb)
    }
}
