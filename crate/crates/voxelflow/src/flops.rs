//! Cost of one large submanifold kernel against its decoupled stack of 3x3x3 layers.

use serde::{Deserialize, Serialize};
use voxelflow_core::conv::{count_flops, ConvParams, FlopsReport};
use voxelflow_core::dffm::{decouple_kernel, describe_spec};
use voxelflow_core::rulebook::build_rulebook;
use voxelflow_core::scene::gen_synthetic_scene;
use voxelflow_core::{ConvMode, Coord, Kernel, SparseTensor};

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::voxelize_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyFlops {
    pub name: String,
    pub active_sites: usize,
    pub monolithic: FlopsReport,
    pub decoupled: FlopsReport,
    pub decoupled_smaller: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub channels: usize,
    pub receptive_field: usize,
    pub decoupled_spec: String,
    /// MACs per fully surrounded site, monolithic then decoupled, in units of `channels^2`.
    pub interior_mac_ratio: [u64; 2],
    pub occupancies: Vec<OccupancyFlops>,
}

/// Every site of an `n^3` grid, zero features.
pub fn dense_cube(n: usize) -> SparseTensor {
    let mut coords = Vec::with_capacity(n * n * n);
    for x in 0..n as u32 {
        for y in 0..n as u32 {
            for z in 0..n as u32 {
                coords.push(Coord::new(x, y, z));
            }
        }
    }
    SparseTensor::new([n, n, n], 0, coords, Vec::new()).expect("canonical cube")
}

fn cost(x: &SparseTensor, kernels: &[Kernel], c: usize) -> Result<FlopsReport> {
    let mut layers = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let rb = build_rulebook(x, k, ConvMode::Submanifold)?;
        layers.push((ConvParams::zeros(k, ConvMode::Submanifold, c, c, false), rb));
    }
    let refs: Vec<(&ConvParams, &_)> = layers.iter().map(|(p, rb)| (p, rb)).collect();
    Ok(count_flops(&refs))
}

pub fn compare_on(name: &str, x: &SparseTensor, rf: usize, c: usize) -> Result<OccupancyFlops> {
    let spec = decouple_kernel(rf)?;
    let monolithic = cost(x, &[Kernel::cube(rf)], c)?;
    let stack: Vec<Kernel> = spec.iter().map(|s| s.kernel()).collect();
    let decoupled = cost(x, &stack, c)?;
    Ok(OccupancyFlops {
        name: name.to_string(),
        active_sites: x.len(),
        decoupled_smaller: decoupled.total_flops < monolithic.total_flops,
        monolithic,
        decoupled,
    })
}

/// Compares the configured receptive field on dense cubes and, optionally,
/// the synthetic scene occupancy.
pub fn compare_flops(cfg: &RunConfig) -> Result<FlopsComparison> {
    let rf = cfg.dffm.target_rf;
    let c = cfg.flops.channels;
    let spec = decouple_kernel(rf)?;
    let mut occupancies = Vec::new();
    for &n in &cfg.flops.cube_sizes {
        occupancies.push(compare_on(&format!("dense_cube_{n}"), &dense_cube(n), rf, c)?);
    }
    if cfg.flops.synthetic {
        let (pc, _) = gen_synthetic_scene(&cfg.scene)?;
        let vox = voxelize_frame(&pc, &cfg.voxel)?;
        occupancies.push(compare_on(&format!("synthetic_seed_{}", cfg.scene.seed), &vox.tensor, rf, c)?);
    }
    let mono = (rf * rf * rf) as u64;
    let dec: u64 = spec.iter().map(|s| s.kernel().volume() as u64).sum();
    Ok(FlopsComparison {
        channels: c,
        receptive_field: rf,
        decoupled_spec: describe_spec(&spec),
        interior_mac_ratio: [mono, dec],
        occupancies,
    })
}
