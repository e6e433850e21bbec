use std::collections::BTreeMap;

use proptest::prelude::*;
use voxelflow_core::scene::PointCloud;
use voxelflow_core::voxel::{voxelize, VoxelConfig};
use voxelflow_core::Coord;

fn cfg(max_voxels: usize) -> VoxelConfig {
    VoxelConfig {
        range_min: [0.0, -2.0, -1.0],
        range_max: [4.0, 2.0, 1.0],
        voxel_size: [0.5, 0.5, 0.5],
        max_voxels,
    }
}

proptest! {
    #[test]
    fn features_are_point_means(pts in prop::collection::vec((-1.0f64..5.0, -3.0f64..3.0, -1.5f64..1.5, 0.0f64..1.0), 0..300)) {
        let c = cfg(10_000);
        let pc = PointCloud::new(pts.iter().map(|&(x, y, z, r)| [x, y, z, r]).collect());
        let v = voxelize(&pc, &c).unwrap();
        let mut groups: BTreeMap<Coord, Vec<[f64; 4]>> = BTreeMap::new();
        let mut outside = 0;
        for p in &pc.points {
            let idx: Vec<f64> = (0..3).map(|a| ((p[a] - c.range_min[a]) / c.voxel_size[a]).floor()).collect();
            let dims = c.grid_dims();
            if (0..3).any(|a| idx[a] < 0.0 || idx[a] >= dims[a] as f64) {
                outside += 1;
                continue;
            }
            groups.entry(Coord::new(idx[0] as u32, idx[1] as u32, idx[2] as u32)).or_default().push(*p);
        }
        prop_assert_eq!(v.out_of_range, outside);
        prop_assert_eq!(v.tensor.len(), groups.len());
        for (i, (coord, members)) in groups.iter().enumerate() {
            prop_assert_eq!(v.tensor.coords()[i], *coord);
            for a in 0..4 {
                let mean = members.iter().map(|p| p[a]).sum::<f64>() / members.len() as f64;
                prop_assert!((v.tensor.row(i)[a] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn empty_cloud_has_no_voxels() {
    let v = voxelize(&PointCloud::new(Vec::new()), &cfg(10)).unwrap();
    assert!(v.tensor.is_empty());
    assert_eq!(v.tensor.grid(), [8, 8, 4]);
}

#[test]
fn cap_keeps_first_encountered_voxels() {
    let pts: Vec<[f64; 4]> = (0..6).map(|i| [0.25 + 0.5 * i as f64, 0.1, 0.1, 0.0]).collect();
    let v = voxelize(&PointCloud::new(pts), &cfg(4)).unwrap();
    assert_eq!(v.tensor.len(), 4);
    assert_eq!(v.dropped_voxels, 2);
    assert_eq!(v.dropped_points, 2);
    assert!(v.truncated());
    assert_eq!(v.tensor.coords().iter().map(|c| c.ix).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn kitti_default_grid() {
    assert_eq!(VoxelConfig::default().grid_dims(), [1408, 1600, 40]);
}
