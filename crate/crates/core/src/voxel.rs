//! Range cropping, voxelization into the initial sparse tensor, and
//! training-time augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou_bev;
use crate::geometry::Box3D;
use crate::math::{cos, floor, round, sin, sqrt, PI};
use crate::scene::{Calib, ClassName, GroundTruth, PointCloud};
use crate::sparse::{Coord, SparseTensor};

/// Channels of the initial voxel feature: mean `(x, y, z, intensity)`.
pub const VOXEL_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_voxels: usize,
}

impl Default for VoxelConfig {
    /// KITTI front-view range at 0.05 x 0.05 x 0.1 m, grid 1408 x 1600 x 40.
    fn default() -> Self {
        VoxelConfig {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            max_voxels: 16000,
        }
    }
}

impl VoxelConfig {
    /// Desk-scale grid of 128 x 128 x 8 over a 12.8 m square.
    pub fn toy() -> Self {
        VoxelConfig {
            range_min: [0.0, -6.4, -2.4],
            range_max: [12.8, 6.4, 0.8],
            voxel_size: [0.1, 0.1, 0.4],
            max_voxels: 16000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) {
                return Err(Error::Config(format!("voxel size on axis {a} must be positive")));
            }
            if !(self.range_min[a] < self.range_max[a]) {
                return Err(Error::Config(format!("range on axis {a}: min must be < max")));
            }
            let n = (self.range_max[a] - self.range_min[a]) / self.voxel_size[a];
            if round(n) < 1.0 || round(n) > u32::MAX as f64 {
                return Err(Error::Config(format!("grid extent on axis {a} out of bounds")));
            }
        }
        if self.max_voxels == 0 {
            return Err(Error::Config(format!("max_voxels must be positive")));
        }
        Ok(())
    }

    /// `(nx, ny, nz)` = rounded range extent over voxel size.
    pub fn grid_dims(&self) -> [usize; 3] {
        let mut g = [0; 3];
        for (a, v) in g.iter_mut().enumerate() {
            *v = round((self.range_max[a] - self.range_min[a]) / self.voxel_size[a]) as usize;
        }
        g
    }

    pub fn in_range(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.range_min[a] && p[a] < self.range_max[a])
    }

    /// Voxel index of an in-range point.
    pub fn index_of(&self, p: [f64; 3]) -> Option<Coord> {
        if !self.in_range(p) {
            return None;
        }
        let g = self.grid_dims();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let i = floor((p[a] - self.range_min[a]) / self.voxel_size[a]).max(0.0) as usize;
            // a point a hair below the upper bound can round up to the extent
            idx[a] = i.min(g[a] - 1) as u32;
        }
        Some(Coord::new(idx[0], idx[1], idx[2]))
    }
}

/// Metric placement of a voxel grid: cell `c` spans
/// `origin + c * cell .. origin + (c + 1) * cell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub cell: [f64; 3],
}

impl GridGeometry {
    pub fn of(cfg: &VoxelConfig) -> Self {
        GridGeometry {
            origin: cfg.range_min,
            cell: cfg.voxel_size,
        }
    }

    /// Geometry after `stride`-fold downsampling.
    pub fn downsample(&self, stride: usize) -> Self {
        GridGeometry {
            origin: self.origin,
            cell: self.cell.map(|c| c * stride as f64),
        }
    }

    pub fn center(&self, c: Coord) -> [f64; 3] {
        let i = [c.ix, c.iy, c.iz];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.origin[a] + (i[a] as f64 + 0.5) * self.cell[a];
        }
        p
    }
}

/// Keeps points with `min <= p < max` on every axis, in their original order.
pub fn crop_points(pc: &PointCloud, cfg: &VoxelConfig) -> PointCloud {
    PointCloud::new(
        pc.points
            .iter()
            .filter(|p| cfg.in_range([p[0], p[1], p[2]]))
            .copied()
            .collect(),
    )
}

/// Output of [`voxelize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub tensor: SparseTensor,
    /// Non-empty voxels discarded by the `max_voxels` cap.
    pub dropped_voxels: usize,
    /// Points that fell into discarded voxels.
    pub dropped_points: usize,
    /// Points outside the range (the input was not cropped).
    pub out_of_range: usize,
}

impl Voxelized {
    pub fn truncated(&self) -> bool {
        self.dropped_voxels > 0
    }
}

/// Mean point feature per non-empty voxel. When more than `max_voxels`
/// voxels are occupied, the first `max_voxels` in point-encounter order win.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelConfig) -> Result<Voxelized> {
    cfg.validate()?;
    let grid = cfg.grid_dims();
    let mut slot_of: BTreeMap<Coord, usize> = BTreeMap::new();
    let mut acc: Vec<([f64; VOXEL_FEATURES], usize)> = Vec::new();
    let mut coords: Vec<Coord> = Vec::new();
    let mut dropped: BTreeMap<Coord, ()> = BTreeMap::new();
    let mut dropped_points = 0;
    let mut out_of_range = 0;
    for p in &pc.points {
        let Some(c) = cfg.index_of([p[0], p[1], p[2]]) else {
            out_of_range += 1;
            continue;
        };
        let slot = match slot_of.get(&c) {
            Some(&s) => s,
            None if acc.len() < cfg.max_voxels => {
                slot_of.insert(c, acc.len());
                coords.push(c);
                acc.push(([0.0; VOXEL_FEATURES], 0));
                acc.len() - 1
            }
            None => {
                dropped.insert(c, ());
                dropped_points += 1;
                continue;
            }
        };
        let (sum, n) = &mut acc[slot];
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        *n += 1;
    }
    let mut features = Vec::with_capacity(acc.len() * VOXEL_FEATURES);
    for (sum, n) in &acc {
        features.extend(sum.iter().map(|s| s / *n as f64));
    }
    let tensor = SparseTensor::new(grid, VOXEL_FEATURES, coords, features)?;
    Ok(Voxelized {
        tensor,
        dropped_voxels: dropped.len(),
        dropped_points,
        out_of_range,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Global yaw interval, radians.
    pub rot_range: [f64; 2],
    pub scale_range: [f64; 2],
    /// Donor boxes inserted per class by [`gt_sample`].
    pub gt_sample_count: usize,
    /// Placement attempts per donor before insertion stops.
    pub gt_sample_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rot_range: [-PI / 4.0, PI / 4.0],
            scale_range: [0.95, 1.05],
            gt_sample_count: 15,
            gt_sample_retries: 20,
        }
    }
}

impl AugmentConfig {
    /// No flip, no rotation, unit scale, no sampling.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rot_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            gt_sample_count: 0,
            gt_sample_retries: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1]")));
        }
        if !(self.rot_range[0] <= self.rot_range[1]) {
            return Err(Error::Config(format!("rot_range must be ordered")));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::Config(format!("scale_range must be positive and ordered")));
        }
        Ok(())
    }
}

/// One concrete draw of the global augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    pub theta: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        theta: 0.0,
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let theta = uniform(rng, cfg.rot_range);
        let scale = uniform(rng, cfg.scale_range);
        AugmentDraw { flip, theta, scale }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + u * (r[1] - r[0])
}

/// Mirror across the x-z plane: `y -> -y`, `yaw -> -yaw`.
pub fn flip_y(points: &mut [[f64; 4]], boxes: &mut [Box3D]) {
    for p in points.iter_mut() {
        p[1] = -p[1];
    }
    for b in boxes.iter_mut() {
        *b = Box3D::new([b.center[0], -b.center[1], b.center[2]], b.dims, -b.yaw);
    }
}

/// Rotation by `theta` about the z axis through the origin.
pub fn rotate_z(points: &mut [[f64; 4]], boxes: &mut [Box3D], theta: f64) {
    let (s, c) = (sin(theta), cos(theta));
    let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    for p in points.iter_mut() {
        (p[0], p[1]) = rot(p[0], p[1]);
    }
    for b in boxes.iter_mut() {
        let (x, y) = rot(b.center[0], b.center[1]);
        *b = Box3D::new([x, y, b.center[2]], b.dims, b.yaw + theta);
    }
}

/// Uniform scaling of coordinates, box centers and box dims.
pub fn scale_scene(points: &mut [[f64; 4]], boxes: &mut [Box3D], s: f64) {
    for p in points.iter_mut() {
        for v in &mut p[..3] {
            *v *= s;
        }
    }
    for b in boxes.iter_mut() {
        let c = b.center.map(|v| v * s);
        *b = Box3D::new(c, b.dims.map(|v| v * s), b.yaw);
    }
}

/// Applies flip, rotation and scale in that order. Annotation camera fields
/// are refreshed under the nominal calibration.
pub fn apply_augment(pc: &PointCloud, gts: &[GroundTruth], draw: AugmentDraw) -> (PointCloud, Vec<GroundTruth>) {
    let mut points = pc.points.clone();
    let mut boxes: Vec<Box3D> = gts.iter().map(|g| g.box3d_lidar).collect();
    if draw.flip {
        flip_y(&mut points, &mut boxes);
    }
    rotate_z(&mut points, &mut boxes, draw.theta);
    scale_scene(&mut points, &mut boxes, draw.scale);
    let calib = Calib::nominal();
    let gts = gts.iter().zip(boxes).map(|(g, b)| g.with_lidar_box(b, &calib)).collect();
    (PointCloud::new(points), gts)
}

/// Random global flip / rotation / scale.
pub fn augment<R: Rng + ?Sized>(
    pc: &PointCloud,
    gts: &[GroundTruth],
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (PointCloud, Vec<GroundTruth>) {
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(pc, gts, draw)
}

/// Donor annotation with the points that were inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub gt: GroundTruth,
    pub points: PointCloud,
}

/// Collects a donor database from annotated scenes: every box together
/// with the points it contains.
pub fn build_gt_database(scenes: &[(PointCloud, Vec<GroundTruth>)]) -> Vec<DbEntry> {
    let mut db = Vec::new();
    for (pc, gts) in scenes {
        for g in gts {
            if g.class_name.class_id().is_none() {
                continue;
            }
            let b = g.box3d_lidar;
            let pts: Vec<[f64; 4]> = pc.points.iter().filter(|p| b.contains([p[0], p[1], p[2]])).copied().collect();
            db.push(DbEntry {
                gt: g.clone(),
                points: PointCloud::new(pts),
            });
        }
    }
    db
}

/// Pastes up to `gt_sample_count` donor boxes per class at random in-range
/// poses whose BEV footprint overlaps no existing or already pasted box.
/// Host points inside a pasted footprint are removed first.
pub fn gt_sample<R: Rng + ?Sized>(
    pc: &PointCloud,
    gts: &[GroundTruth],
    db: &[DbEntry],
    rng: &mut R,
    cfg: &AugmentConfig,
    range: &VoxelConfig,
) -> (PointCloud, Vec<GroundTruth>) {
    if db.is_empty() || cfg.gt_sample_count == 0 {
        return (pc.clone(), gts.to_vec());
    }
    let calib = Calib::nominal();
    let mut boxes: Vec<Box3D> = gts.iter().map(|g| g.box3d_lidar).collect();
    let mut placed: Vec<(Box3D, usize)> = Vec::new();
    for class in [ClassName::Car, ClassName::Pedestrian, ClassName::Cyclist] {
        let donors: Vec<usize> = (0..db.len()).filter(|&i| db[i].gt.class_name == class).collect();
        if donors.is_empty() {
            continue;
        }
        'insert: for _ in 0..cfg.gt_sample_count {
            let di = donors[rng.random_range(0..donors.len())];
            let donor = &db[di].gt.box3d_lidar;
            let r = sqrt(donor.dims[0] * donor.dims[0] + donor.dims[1] * donor.dims[1]) / 2.0;
            let (x0, x1) = (range.range_min[0] + r, range.range_max[0] - r);
            let (y0, y1) = (range.range_min[1] + r, range.range_max[1] - r);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            for _ in 0..cfg.gt_sample_retries {
                let cand = Box3D::new(
                    [rng.random_range(x0..x1), rng.random_range(y0..y1), donor.center[2]],
                    donor.dims,
                    rng.random_range(-PI..PI),
                );
                if boxes.iter().all(|b| iou_bev(b, &cand) == 0.0) {
                    boxes.push(cand);
                    placed.push((cand, di));
                    continue 'insert;
                }
            }
            break;
        }
    }
    let mut points: Vec<[f64; 4]> = pc
        .points
        .iter()
        .filter(|p| !placed.iter().any(|(b, _)| b.contains_bev(p[0], p[1])))
        .copied()
        .collect();
    let mut out_gts = gts.to_vec();
    for (b, di) in &placed {
        let e = &db[*di];
        for p in &e.points.points {
            let q = e.gt.box3d_lidar.to_local([p[0], p[1], p[2]]);
            let w = b.from_local(q);
            points.push([w[0], w[1], w[2], p[3]]);
        }
        out_gts.push(e.gt.with_lidar_box(*b, &calib));
    }
    (PointCloud::new(points), out_gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_synthetic_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid() {
        assert_eq!(VoxelConfig::default().grid_dims(), [1408, 1600, 40]);
        assert_eq!(VoxelConfig::toy().grid_dims(), [128, 128, 8]);
    }

    #[test]
    fn crop_half_open() {
        let cfg = VoxelConfig::default();
        let pc = PointCloud::new(alloc::vec![[0.0, 0.0, -3.0, 0.1], [70.4, 0.0, 0.0, 0.1], [1.0, 40.0, 0.0, 0.0]]);
        let c = crop_points(&pc, &cfg);
        assert_eq!(c.points, alloc::vec![[0.0, 0.0, -3.0, 0.1]]);
    }

    #[test]
    fn single_point_index() {
        let cfg = VoxelConfig::default();
        let v = voxelize(&PointCloud::new(alloc::vec![[0.025, 0.0, -2.95, 0.7]]), &cfg).unwrap();
        assert_eq!(v.tensor.coords(), &[Coord::new(0, 800, 0)]);
        assert_eq!(v.tensor.row(0), &[0.025, 0.0, -2.95, 0.7]);
    }

    #[test]
    fn mean_of_two_points() {
        let cfg = VoxelConfig::default();
        let pc = PointCloud::new(alloc::vec![[1.01, 1.01, 0.01, 0.2], [1.02, 1.02, 0.02, 0.4]]);
        let v = voxelize(&pc, &cfg).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert!((v.tensor.row(0)[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn truncation_keeps_first_encountered() {
        let cfg = VoxelConfig {
            max_voxels: 2,
            ..VoxelConfig::default()
        };
        let pc = PointCloud::new(alloc::vec![
            [5.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.5]
        ]);
        let v = voxelize(&pc, &cfg).unwrap();
        assert_eq!(v.tensor.len(), 2);
        assert_eq!(v.dropped_voxels, 1);
        assert_eq!(v.dropped_points, 1);
        assert!(v.tensor.find(cfg.index_of([3.0, 0.0, 0.0]).unwrap()).is_none());
    }

    #[test]
    fn rotation_quarter_turn() {
        let mut p = [[1.0, 0.0, 0.0, 0.0]];
        rotate_z(&mut p, &mut [], PI / 2.0);
        assert!((p[0][0]).abs() < 1e-12 && (p[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_is_involution() {
        let (pc, gts) = gen_synthetic_scene(&SceneConfig::default()).unwrap();
        let d = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        let (a, ga) = apply_augment(&pc, &gts, d);
        let (b, gb) = apply_augment(&a, &ga, d);
        assert_eq!(b.points, pc.points);
        for (x, y) in gb.iter().zip(&gts) {
            assert!((x.box3d_lidar.yaw - y.box3d_lidar.yaw).abs() < 1e-12);
            assert_eq!(x.box3d_lidar.center, y.box3d_lidar.center);
        }
    }

    #[test]
    fn augmentation_preserves_membership() {
        let (pc, gts) = gen_synthetic_scene(&SceneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let cfg = AugmentConfig {
                flip_prob: 0.5,
                ..AugmentConfig::default()
            };
            let (a, ga) = augment(&pc, &gts, &mut rng, &cfg);
            assert_eq!(a.len(), pc.len());
            for (p, q) in pc.points.iter().zip(&a.points) {
                for (g, h) in gts.iter().zip(&ga) {
                    let before = g.box3d_lidar.contains([p[0], p[1], p[2]]);
                    let after = h.box3d_lidar.contains([q[0], q[1], q[2]]);
                    if before {
                        assert!(after);
                    }
                }
            }
        }
    }

    #[test]
    fn gt_sample_into_empty_scene() {
        let (pc, gts) = gen_synthetic_scene(&SceneConfig {
            num_boxes: 1,
            noise_points: 0,
            ..SceneConfig::default()
        })
        .unwrap();
        let db = build_gt_database(&[(pc, gts)]);
        assert_eq!(db.len(), 1);
        let cfg = AugmentConfig {
            gt_sample_count: 1,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, g) = gt_sample(&PointCloud::default(), &[], &db, &mut rng, &cfg, &VoxelConfig::toy());
        assert_eq!(g.len(), 1);
        assert_eq!(out.len(), db[0].points.len());
        let b = g[0].box3d_lidar;
        assert!(out.points.iter().all(|p| b.contains([p[0], p[1], p[2]])));
        let (same, sg) = gt_sample(&out, &g, &[], &mut rng, &cfg, &VoxelConfig::toy());
        assert_eq!((same, sg), (out, g));
    }
}
