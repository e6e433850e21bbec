//! The sparse voxel tensor and its coordinate index.
//!
//! A [`SparseTensor`] is a set of active grid coordinates with one feature
//! row per coordinate. Coordinates are always kept in canonical
//! lexicographic `(ix, iy, iz)` order, which makes every downstream
//! accumulation order, tie-break and golden dump deterministic.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of cells `to_dense` / `height_compress` will materialize.
pub const DENSE_CELL_LIMIT: usize = 64 * 64 * 64;

/// A nonnegative voxel index. Ordering is lexicographic on `(ix, iy, iz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
}

impl Coord {
    pub const fn new(ix: u32, iy: u32, iz: u32) -> Self {
        Coord { ix, iy, iz }
    }

    pub fn as_array(self) -> [i64; 3] {
        [self.ix as i64, self.iy as i64, self.iz as i64]
    }

    /// Builds a coordinate from signed components, `None` if any is outside `grid`.
    pub fn checked(p: [i64; 3], grid: [usize; 3]) -> Option<Coord> {
        for a in 0..3 {
            if p[a] < 0 || p[a] >= grid[a] as i64 {
                return None;
            }
        }
        Some(Coord::new(p[0] as u32, p[1] as u32, p[2] as u32))
    }

    pub fn in_grid(self, grid: [usize; 3]) -> bool {
        (self.ix as usize) < grid[0] && (self.iy as usize) < grid[1] && (self.iz as usize) < grid[2]
    }

    /// Chebyshev (L-infinity) distance.
    pub fn chebyshev(self, other: Coord) -> u32 {
        let d = |a: u32, b: u32| a.abs_diff(b);
        d(self.ix, other.ix).max(d(self.iy, other.iy)).max(d(self.iz, other.iz))
    }
}

/// Exact coordinate -> row lookup over an arbitrary coordinate list.
#[derive(Debug, Clone, Default)]
pub struct CoordIndex {
    entries: Vec<(Coord, usize)>,
}

impl CoordIndex {
    /// Rejects duplicates with [`Error::DuplicateCoord`].
    pub fn build(coords: &[Coord]) -> Result<Self> {
        let mut entries: Vec<(Coord, usize)> = coords.iter().copied().zip(0..).collect();
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateCoord(w[0].0));
            }
        }
        Ok(CoordIndex { entries })
    }

    pub fn get(&self, c: Coord) -> Option<usize> {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(&c))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Active coordinates with per-coordinate feature rows over a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    grid: [usize; 3],
    channels: usize,
    coords: Vec<Coord>,
    features: Vec<f64>,
}

impl SparseTensor {
    pub fn empty(grid: [usize; 3], channels: usize) -> Self {
        SparseTensor {
            grid,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
        }
    }

    /// Builds a tensor from rows in any order; the result is canonicalized.
    pub fn new(grid: [usize; 3], channels: usize, coords: Vec<Coord>, features: Vec<f64>) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::ShapeMismatch {
                what: "sparse tensor features",
                expected: coords.len() * channels,
                got: features.len(),
            });
        }
        for &c in &coords {
            if !c.in_grid(grid) {
                return Err(Error::CoordOutOfRange { coord: c, grid });
            }
        }
        let sorted = coords.windows(2).all(|w| w[0] < w[1]);
        if sorted {
            return Ok(SparseTensor {
                grid,
                channels,
                coords,
                features,
            });
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| coords[i]);
        for w in order.windows(2) {
            if coords[w[0]] == coords[w[1]] {
                return Err(Error::DuplicateCoord(coords[w[0]]));
            }
        }
        let mut c2 = Vec::with_capacity(coords.len());
        let mut f2 = Vec::with_capacity(features.len());
        for &i in &order {
            c2.push(coords[i]);
            f2.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        Ok(SparseTensor {
            grid,
            channels,
            coords: c2,
            features: f2,
        })
    }

    /// Same coordinates as `self`, new features. Row order is preserved.
    pub fn with_features(&self, channels: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.coords.len() * channels {
            return Err(Error::ShapeMismatch {
                what: "replacement features",
                expected: self.coords.len() * channels,
                got: features.len(),
            });
        }
        Ok(SparseTensor {
            grid: self.grid,
            channels,
            coords: self.coords.clone(),
            features,
        })
    }

    /// Constructor for coordinates already known to be canonical and in range.
    pub(crate) fn from_canonical(grid: [usize; 3], channels: usize, coords: Vec<Coord>, features: Vec<f64>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(features.len(), coords.len() * channels);
        SparseTensor {
            grid,
            channels,
            coords,
            features,
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Row of `c`, if active. Binary search over the canonical order.
    pub fn find(&self, c: Coord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    /// Keeps the given rows (ascending) with their features untouched.
    pub fn select_rows(&self, rows: &[usize]) -> SparseTensor {
        let mut coords = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len() * self.channels);
        for &r in rows {
            coords.push(self.coords[r]);
            features.extend_from_slice(self.row(r));
        }
        SparseTensor::from_canonical(self.grid, self.channels, coords, features)
    }

    pub fn to_dense(&self) -> Result<DenseGrid> {
        let cells = self.grid[0] * self.grid[1] * self.grid[2];
        if cells > DENSE_CELL_LIMIT {
            return Err(Error::GridTooLarge {
                grid: self.grid,
                limit: DENSE_CELL_LIMIT,
            });
        }
        let mut d = DenseGrid::zeros(self.grid, self.channels);
        for (i, &c) in self.coords.iter().enumerate() {
            d.at_mut(c).copy_from_slice(self.row(i));
        }
        Ok(d)
    }

    /// Inverse of [`to_dense`](Self::to_dense): every cell with a nonzero
    /// feature becomes active.
    pub fn from_dense(d: &DenseGrid) -> SparseTensor {
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for ix in 0..d.dims[0] {
            for iy in 0..d.dims[1] {
                for iz in 0..d.dims[2] {
                    let c = Coord::new(ix as u32, iy as u32, iz as u32);
                    let v = d.at(c);
                    if v.iter().any(|&x| x != 0.0) {
                        coords.push(c);
                        features.extend_from_slice(v);
                    }
                }
            }
        }
        SparseTensor::from_canonical(d.dims, d.channels, coords, features)
    }

    /// Every cell of `d` becomes active, zero or not.
    pub fn from_dense_full(d: &DenseGrid) -> SparseTensor {
        let mut coords = Vec::with_capacity(d.dims[0] * d.dims[1] * d.dims[2]);
        for ix in 0..d.dims[0] {
            for iy in 0..d.dims[1] {
                for iz in 0..d.dims[2] {
                    coords.push(Coord::new(ix as u32, iy as u32, iz as u32));
                }
            }
        }
        SparseTensor::from_canonical(d.dims, d.channels, coords, d.data.clone())
    }

    pub fn dump(&self) -> SparseDump {
        SparseDump {
            grid_dims: self.grid,
            channels: self.channels,
            coords: self.coords.iter().map(|c| [c.ix, c.iy, c.iz]).collect(),
            features: self.coords.iter().enumerate().map(|(i, _)| self.row(i).to_vec()).collect(),
        }
    }
}

/// JSON-friendly debug view of a [`SparseTensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDump {
    pub grid_dims: [usize; 3],
    pub channels: usize,
    pub coords: Vec<[u32; 3]>,
    pub features: Vec<Vec<f64>>,
}

impl SparseDump {
    pub fn into_tensor(self) -> Result<SparseTensor> {
        let coords = self.coords.iter().map(|c| Coord::new(c[0], c[1], c[2])).collect();
        let mut features = Vec::with_capacity(self.features.len() * self.channels);
        for row in &self.features {
            if row.len() != self.channels {
                return Err(Error::ShapeMismatch {
                    what: "dump feature row",
                    expected: self.channels,
                    got: row.len(),
                });
            }
            features.extend_from_slice(row);
        }
        SparseTensor::new(self.grid_dims, self.channels, coords, features)
    }
}

/// Dense `(nx, ny, nz, c)` array, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        DenseGrid {
            dims,
            channels,
            data: vec![0.0; dims[0] * dims[1] * dims[2] * channels],
        }
    }

    pub fn offset(&self, c: Coord) -> usize {
        ((c.ix as usize * self.dims[1] + c.iy as usize) * self.dims[2] + c.iz as usize) * self.channels
    }

    pub fn at(&self, c: Coord) -> &[f64] {
        let o = self.offset(c);
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, c: Coord) -> &mut [f64] {
        let o = self.offset(c);
        &mut self.data[o..o + self.channels]
    }
}

/// Dense bird's-eye-view map `(nx, ny, c * nz)`: the z-slices of a sparse
/// tensor concatenated along channels, slice `iz` at `[iz*c, (iz+1)*c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevMap {
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (x * self.ny + y) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// Row mapping used by height compression: `(sparse_row, bev_row, channel_offset)`.
pub type HeightMap = Vec<(usize, usize, usize)>;

/// Collapses z into channels, producing a dense BEV map.
pub fn height_compress(t: &SparseTensor) -> Result<BevMap> {
    let [nx, ny, nz] = t.grid;
    if nx * ny * nz > DENSE_CELL_LIMIT {
        return Err(Error::GridTooLarge {
            grid: t.grid,
            limit: DENSE_CELL_LIMIT,
        });
    }
    let c = t.channels;
    let channels = c * nz;
    let mut data = vec![0.0; nx * ny * channels];
    for (i, p) in t.coords.iter().enumerate() {
        let base = (p.ix as usize * ny + p.iy as usize) * channels + p.iz as usize * c;
        data[base..base + c].copy_from_slice(t.row(i));
    }
    Ok(BevMap { nx, ny, channels, data })
}

/// BEV columns of a canonical coordinate list and the row mapping
/// `(row, column_row, iz * channels)`.
pub fn height_map(coords: &[Coord], channels: usize) -> (Vec<Coord>, HeightMap) {
    let mut cols: Vec<Coord> = Vec::new();
    let mut map = Vec::with_capacity(coords.len());
    // canonical order groups each column contiguously
    for (i, p) in coords.iter().enumerate() {
        let col = Coord::new(p.ix, p.iy, 0);
        if cols.last() != Some(&col) {
            cols.push(col);
        }
        map.push((i, cols.len() - 1, p.iz as usize * channels));
    }
    (cols, map)
}

/// Sparse counterpart of [`height_compress`]: one active BEV cell per
/// occupied `(ix, iy)` column on a `(nx, ny, 1)` grid. Also returns the row
/// mapping so the same scatter can be recorded on a tape.
pub fn height_compress_sparse(t: &SparseTensor) -> (SparseTensor, HeightMap) {
    let [nx, ny, nz] = t.grid;
    let c = t.channels;
    let channels = c * nz;
    let (coords, map) = height_map(&t.coords, c);
    let mut features = vec![0.0; coords.len() * channels];
    for &(src, dst, off) in &map {
        let o = dst * channels + off;
        features[o..o + c].copy_from_slice(t.row(src));
    }
    (
        SparseTensor::from_canonical([nx, ny, 1], channels, coords, features),
        map,
    )
}
