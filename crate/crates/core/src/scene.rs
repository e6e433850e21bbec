//! Point clouds, KITTI-style annotations and deterministic synthetic scenes.
//!
//! KITTI labels live in the rectified camera frame (x right, y down, z
//! forward, location at the bottom center of the box). The engine works in
//! the LiDAR frame (x forward, y left, z up, box center at mid height). A
//! [`Calib`] maps between the two; [`Calib::nominal`] is the pure axis swap
//! used when no calibration file is available, including synthetic scenes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou_bev;
use crate::geometry::Box3D;
use crate::math::{atan2, cos, floor, sin, sqrt, wrap_angle, PI};

/// Raw LiDAR returns as `[x, y, z, intensity]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassName {
    Car,
    Pedestrian,
    Cyclist,
    DontCare,
    Other,
}

impl ClassName {
    pub fn parse(s: &str) -> Self {
        match s {
            "Car" => ClassName::Car,
            "Pedestrian" => ClassName::Pedestrian,
            "Cyclist" => ClassName::Cyclist,
            "DontCare" => ClassName::DontCare,
            _ => ClassName::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassName::Car => "Car",
            ClassName::Pedestrian => "Pedestrian",
            ClassName::Cyclist => "Cyclist",
            ClassName::DontCare => "DontCare",
            ClassName::Other => "Other",
        }
    }

    /// Detector class index for the evaluated classes.
    pub fn class_id(self) -> Option<usize> {
        match self {
            ClassName::Car => Some(0),
            ClassName::Pedestrian => Some(1),
            ClassName::Cyclist => Some(2),
            _ => None,
        }
    }

    pub fn from_class_id(id: usize) -> Self {
        match id {
            0 => ClassName::Car,
            1 => ClassName::Pedestrian,
            2 => ClassName::Cyclist,
            _ => ClassName::Other,
        }
    }
}

/// `Tr_velo_to_cam` (3x4 rigid) and `R0_rect` (3x3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calib {
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

fn mat3_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat3_inverse(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    let mut r = [[0.0; 3]; 3];
    r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv;
    r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv;
    r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv;
    r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv;
    r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv;
    r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv;
    r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv;
    r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv;
    r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv;
    r
}

impl Calib {
    /// Axis swap only: `cam = (-y, -z, x)`.
    pub const fn nominal() -> Self {
        Calib {
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        }
    }

    fn rot(&self) -> [[f64; 3]; 3] {
        let t = &self.tr_velo_to_cam;
        [[t[0][0], t[0][1], t[0][2]], [t[1][0], t[1][1], t[1][2]], [t[2][0], t[2][1], t[2][2]]]
    }

    fn trans(&self) -> [f64; 3] {
        let t = &self.tr_velo_to_cam;
        [t[0][3], t[1][3], t[2][3]]
    }

    /// Direction (no translation) from LiDAR to rectified camera.
    pub fn lidar_dir_to_cam(&self, v: [f64; 3]) -> [f64; 3] {
        mat3_vec(&self.r0_rect, mat3_vec(&self.rot(), v))
    }

    pub fn cam_dir_to_lidar(&self, v: [f64; 3]) -> [f64; 3] {
        let u = mat3_vec(&mat3_inverse(&self.r0_rect), v);
        mat3_vec(&mat3_inverse(&self.rot()), u)
    }

    pub fn lidar_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat3_vec(&self.rot(), p);
        let t = self.trans();
        mat3_vec(&self.r0_rect, [r[0] + t[0], r[1] + t[1], r[2] + t[2]])
    }

    pub fn cam_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let u = mat3_vec(&mat3_inverse(&self.r0_rect), p);
        let t = self.trans();
        mat3_vec(&mat3_inverse(&self.rot()), [u[0] - t[0], u[1] - t[1], u[2] - t[2]])
    }

    /// LiDAR box from KITTI camera fields.
    pub fn box_from_camera(&self, dims_hwl: [f64; 3], location: [f64; 3], rotation_y: f64) -> Box3D {
        let [h, w, l] = dims_hwl;
        let bottom = self.cam_to_lidar(location);
        let heading_cam = [cos(rotation_y), 0.0, -sin(rotation_y)];
        let hl = self.cam_dir_to_lidar(heading_cam);
        Box3D::new([bottom[0], bottom[1], bottom[2] + h / 2.0], [l, w, h], atan2(hl[1], hl[0]))
    }

    /// KITTI camera fields `(dims_hwl, location, rotation_y)` of a LiDAR box.
    pub fn box_to_camera(&self, b: &Box3D) -> ([f64; 3], [f64; 3], f64) {
        let [l, w, h] = b.dims;
        let loc = self.lidar_to_cam([b.center[0], b.center[1], b.center[2] - h / 2.0]);
        let d = self.lidar_dir_to_cam([cos(b.yaw), sin(b.yaw), 0.0]);
        let ry = normalize_ry(atan2(-d[2], d[0]));
        ([h, w, l], loc, ry)
    }
}

/// Wraps into `[-pi, pi]`.
fn normalize_ry(a: f64) -> f64 {
    let w = wrap_angle(a);
    if w < -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Nominal pinhole camera used to synthesize 2D boxes (KITTI-like intrinsics).
pub const IMAGE_SIZE: [f64; 2] = [1242.0, 375.0];
const FOCAL: f64 = 721.5377;
const PRINCIPAL: [f64; 2] = [609.5593, 172.854];

/// Projected, image-clipped 2D box and the truncated fraction of its area.
pub fn project_bbox2d(calib: &Calib, b: &Box3D) -> ([f64; 4], f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in b.corners() {
        let p = calib.lidar_to_cam(c);
        if p[2] < 0.1 {
            return ([0.0; 4], 1.0);
        }
        let u = FOCAL * p[0] / p[2] + PRINCIPAL[0];
        let v = FOCAL * p[1] / p[2] + PRINCIPAL[1];
        lo = [lo[0].min(u), lo[1].min(v)];
        hi = [hi[0].max(u), hi[1].max(v)];
    }
    let full = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let cl = [lo[0].clamp(0.0, IMAGE_SIZE[0]), lo[1].clamp(0.0, IMAGE_SIZE[1])];
    let ch = [hi[0].clamp(0.0, IMAGE_SIZE[0]), hi[1].clamp(0.0, IMAGE_SIZE[1])];
    let clipped = (ch[0] - cl[0]) * (ch[1] - cl[1]);
    let trunc = if full > 0.0 { (1.0 - clipped / full).clamp(0.0, 1.0) } else { 1.0 };
    ([cl[0], cl[1], ch[0], ch[1]], trunc)
}

/// One KITTI annotation plus its LiDAR-frame box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_name: ClassName,
    pub truncated: f64,
    pub occluded: u8,
    pub alpha: f64,
    /// `(left, top, right, bottom)` pixels.
    pub bbox2d: [f64; 4],
    /// `(h, w, l)` meters.
    pub dims: [f64; 3],
    /// Bottom center in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub box3d_lidar: Box3D,
}

impl GroundTruth {
    /// Annotation for a LiDAR-frame box; camera fields and the 2D box come
    /// from `calib` and the nominal camera.
    pub fn from_lidar_box(class_name: ClassName, b: Box3D, occluded: u8, calib: &Calib) -> Self {
        let (dims, location, rotation_y) = calib.box_to_camera(&b);
        let (bbox2d, truncated) = project_bbox2d(calib, &b);
        GroundTruth {
            class_name,
            truncated,
            occluded,
            alpha: observation_angle(rotation_y, location),
            bbox2d,
            dims,
            location,
            rotation_y,
            box3d_lidar: b,
        }
    }

    /// Replaces the LiDAR box, keeping class/occlusion and refreshing derived fields.
    pub fn with_lidar_box(&self, b: Box3D, calib: &Calib) -> Self {
        GroundTruth::from_lidar_box(self.class_name, b, self.occluded, calib)
    }

    /// Recomputes the LiDAR box from the camera fields under `calib`.
    pub fn recompute_lidar(&mut self, calib: &Calib) {
        self.box3d_lidar = calib.box_from_camera(self.dims, self.location, self.rotation_y);
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }
}

fn observation_angle(ry: f64, loc: [f64; 3]) -> f64 {
    normalize_ry(ry - atan2(loc[0], loc[2]))
}

fn parse_f64(tok: &str, field: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Format(format!("unparseable {field} '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("non-finite {field} '{tok}'")));
    }
    Ok(v)
}

/// Parses one label line (15 fields, or 16 with a trailing score). The LiDAR
/// box is derived with `calib`.
pub fn parse_label_line(line: &str, calib: &Calib) -> Result<(GroundTruth, Option<f64>)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 15 && toks.len() != 16 {
        return Err(Error::Format(format!("expected 15 or 16 fields, found {}", toks.len())));
    }
    let class_name = ClassName::parse(toks[0]);
    let truncated = parse_f64(toks[1], "truncated")?;
    let occluded_f = parse_f64(toks[2], "occluded")?;
    if occluded_f < 0.0 || floor(occluded_f) != occluded_f {
        return Err(Error::Format(format!("occluded must be a nonnegative integer, got '{}'", toks[2])));
    }
    let alpha = parse_f64(toks[3], "alpha")?;
    let mut nums = [0.0; 11];
    for (i, n) in nums.iter_mut().enumerate() {
        *n = parse_f64(toks[4 + i], "box field")?;
    }
    let score = if toks.len() == 16 {
        Some(parse_f64(toks[15], "score")?)
    } else {
        None
    };
    let bbox2d = [nums[0], nums[1], nums[2], nums[3]];
    let dims = [nums[4], nums[5], nums[6]];
    let location = [nums[7], nums[8], nums[9]];
    let rotation_y = nums[10];
    let box3d_lidar = calib.box_from_camera(dims, location, rotation_y);
    Ok((
        GroundTruth {
            class_name,
            truncated,
            occluded: occluded_f as u8,
            alpha,
            bbox2d,
            dims,
            location,
            rotation_y,
            box3d_lidar,
        },
        score,
    ))
}

/// Formats a label line with fixed two-decimal floats and an optional score.
pub fn format_label_line(gt: &GroundTruth, score: Option<f64>) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
        gt.class_name.as_str(),
        gt.truncated,
        gt.occluded,
        gt.alpha,
        gt.bbox2d[0],
        gt.bbox2d[1],
        gt.bbox2d[2],
        gt.bbox2d[3],
        gt.dims[0],
        gt.dims[1],
        gt.dims[2],
        gt.location[0],
        gt.location[1],
        gt.location[2],
        gt.rotation_y,
    );
    if let Some(sc) = score {
        let _ = write!(s, " {sc:.2}");
    }
    s
}

/// Parses a calibration file body: `KEY: v0 v1 ...` lines; only
/// `Tr_velo_to_cam` and `R0_rect` are consumed.
pub fn parse_calib(text: &str) -> Result<Calib> {
    let mut r0: Option<[[f64; 3]; 3]> = None;
    let mut tr: Option<[[f64; 4]; 3]> = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim();
        if key != "R0_rect" && key != "Tr_velo_to_cam" {
            continue;
        }
        let vals = rest
            .split_whitespace()
            .map(|t| parse_f64(t, key))
            .collect::<Result<Vec<f64>>>()?;
        if key == "R0_rect" {
            if vals.len() != 9 {
                return Err(Error::Format(format!("R0_rect needs 9 values, found {}", vals.len())));
            }
            let mut m = [[0.0; 3]; 3];
            for i in 0..9 {
                m[i / 3][i % 3] = vals[i];
            }
            r0 = Some(m);
        } else {
            if vals.len() != 12 {
                return Err(Error::Format(format!("Tr_velo_to_cam needs 12 values, found {}", vals.len())));
            }
            let mut m = [[0.0; 4]; 3];
            for i in 0..12 {
                m[i / 4][i % 4] = vals[i];
            }
            tr = Some(m);
        }
    }
    match (r0, tr) {
        (Some(r0_rect), Some(tr_velo_to_cam)) => Ok(Calib { r0_rect, tr_velo_to_cam }),
        _ => Err(Error::Format("calibration is missing R0_rect or Tr_velo_to_cam".to_string())),
    }
}

/// Synthetic scene parameters. Boxes are Cars resting on `ground_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_boxes: usize,
    pub points_per_box: usize,
    pub noise_points: usize,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub ground_z: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_boxes: 3,
            points_per_box: 300,
            noise_points: 400,
            range_min: [0.0, -6.4, -2.4],
            range_max: [12.8, 6.4, 0.8],
            ground_z: -1.6,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.range_min[a] < self.range_max[a]) {
                return Err(Error::Config(format!("scene range axis {a}: min must be < max")));
            }
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 200;
/// Fraction of in-box points sampled on the surface shell rather than the volume.
const SHELL_FRACTION: f64 = 0.8;

/// Uniform point in `b`, biased toward a thin shell under its faces.
pub fn sample_in_box<R: Rng + ?Sized>(b: &Box3D, rng: &mut R) -> [f64; 3] {
    let [l, w, h] = b.dims;
    // stay strictly inside so the closed containment test never sees rounding
    let shrink = 1.0 - 1e-9;
    let half = [l / 2.0 * shrink, w / 2.0 * shrink, h / 2.0 * shrink];
    let mut q = [
        rng.random_range(-half[0]..=half[0]),
        rng.random_range(-half[1]..=half[1]),
        rng.random_range(-half[2]..=half[2]),
    ];
    if rng.random::<f64>() < SHELL_FRACTION {
        let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut face = 5;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let depth = rng.random::<f64>() * (0.1 * half[axis]);
        q[axis] = sign * (half[axis] - depth);
    }
    b.from_local(q)
}

/// Deterministic scene: `num_boxes` non-overlapping cars, each with
/// `points_per_box` points, followed by `noise_points` uniform points.
/// Point order: box 0's points, box 1's points, ..., then noise.
pub fn gen_synthetic_scene(cfg: &SceneConfig) -> Result<(PointCloud, Vec<GroundTruth>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let calib = Calib::nominal();
    let mut boxes: Vec<Box3D> = Vec::with_capacity(cfg.num_boxes);
    let mut gts = Vec::with_capacity(cfg.num_boxes);
    for n in 0..cfg.num_boxes {
        let l = rng.random_range(3.5..4.5);
        let w = rng.random_range(1.5..1.9);
        let h = rng.random_range(1.4..1.7);
        let occluded = rng.random_range(0..2u8);
        let r = sqrt(l * l + w * w) / 2.0;
        let (xmin, xmax) = (cfg.range_min[0] + r, cfg.range_max[0] - r);
        let (ymin, ymax) = (cfg.range_min[1] + r, cfg.range_max[1] - r);
        let cz = cfg.ground_z + h / 2.0;
        if xmin >= xmax || ymin >= ymax || cz - h / 2.0 < cfg.range_min[2] || cz + h / 2.0 >= cfg.range_max[2] {
            return Err(Error::Generation(format!("range too small for box {n}")));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cand = Box3D::new(
                [rng.random_range(xmin..xmax), rng.random_range(ymin..ymax), cz],
                [l, w, h],
                rng.random_range(-PI..PI),
            );
            if boxes.iter().all(|b| iou_bev(b, &cand) == 0.0) {
                placed = Some(cand);
                break;
            }
        }
        let b = placed.ok_or_else(|| Error::Generation(format!("could not place box {n} without overlap")))?;
        boxes.push(b);
        gts.push(GroundTruth::from_lidar_box(ClassName::Car, b, occluded, &calib));
    }
    let mut points = Vec::with_capacity(cfg.num_boxes * cfg.points_per_box + cfg.noise_points);
    for b in &boxes {
        for _ in 0..cfg.points_per_box {
            let p = sample_in_box(b, &mut rng);
            points.push([p[0], p[1], p[2], rng.random::<f64>()]);
        }
    }
    for _ in 0..cfg.noise_points {
        let mut p = [0.0; 4];
        for a in 0..3 {
            p[a] = rng.random_range(cfg.range_min[a]..cfg.range_max[a]);
        }
        p[3] = rng.random::<f64>();
        points.push(p);
    }
    Ok((PointCloud::new(points), gts))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "Car 0.0 0 -1.58 587 173 614 200 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parse_positional_fields() {
        let (gt, score) = parse_label_line(LINE, &Calib::nominal()).unwrap();
        assert_eq!(gt.class_name, ClassName::Car);
        assert_eq!(gt.dims, [1.65, 1.67, 3.64]);
        assert_eq!(gt.location, [-0.65, 1.71, 46.70]);
        assert_eq!(gt.rotation_y, -1.59);
        assert_eq!(gt.bbox2d, [587.0, 173.0, 614.0, 200.0]);
        assert_eq!(score, None);
        // nominal frame: x_l = z_c, y_l = -x_c, z center = -y_c + h/2
        let b = gt.box3d_lidar;
        assert!((b.center[0] - 46.70).abs() < 1e-12);
        assert!((b.center[1] - 0.65).abs() < 1e-12);
        assert!((b.center[2] - (-1.71 + 1.65 / 2.0)).abs() < 1e-12);
        assert!((b.yaw - wrap_angle(1.59 - PI / 2.0)).abs() < 1e-12);
        assert_eq!(b.dims, [3.64, 1.67, 1.65]);
    }

    #[test]
    fn wrong_field_count() {
        let fourteen: Vec<&str> = LINE.split(' ').take(14).collect();
        assert!(matches!(parse_label_line(&fourteen.join(" "), &Calib::nominal()), Err(Error::Format(_))));
        let bad = LINE.replace("46.70", "abc");
        assert!(parse_label_line(&bad, &Calib::nominal()).is_err());
    }

    #[test]
    fn unknown_class_is_other() {
        let van = LINE.replacen("Car", "Van", 1);
        assert_eq!(parse_label_line(&van, &Calib::nominal()).unwrap().0.class_name, ClassName::Other);
    }

    #[test]
    fn format_score_suffix() {
        let (gt, _) = parse_label_line(LINE, &Calib::nominal()).unwrap();
        let s = format_label_line(&gt, Some(0.9));
        assert!(s.ends_with(" 0.90"));
        assert_eq!(s.split_whitespace().count(), 16);
        let (again, sc) = parse_label_line(&s, &Calib::nominal()).unwrap();
        assert_eq!(sc, Some(0.9));
        assert_eq!(again.dims, gt.dims);
    }

    #[test]
    fn camera_round_trip_with_real_calib() {
        let calib = parse_calib(
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
             R0_rect: 0.9999239 0.00983776 -0.007445048 -0.009869795 0.9999421 -0.004278459 0.007402527 0.004351614 0.9999631\n\
             Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01\n",
        )
        .unwrap();
        let b = Box3D::new([12.0, -3.0, -0.8], [4.0, 1.7, 1.5], 0.4);
        let (dims, loc, ry) = calib.box_to_camera(&b);
        let back = calib.box_from_camera(dims, loc, ry);
        for a in 0..3 {
            assert!((back.center[a] - b.center[a]).abs() < 1e-9, "{back:?}");
        }
        // rotation_y is a single angle about the camera y axis, which is
        // tilted slightly against LiDAR z, so yaw only survives approximately
        assert!((back.yaw - b.yaw).abs() < 1e-3);
    }

    #[test]
    fn calib_missing_key() {
        assert!(parse_calib("R0_rect: 1 0 0 0 1 0 0 0 1\n").is_err());
    }

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            num_boxes: 0,
            noise_points: 0,
            ..SceneConfig::default()
        };
        let (pc, gts) = gen_synthetic_scene(&cfg).unwrap();
        assert!(pc.is_empty() && gts.is_empty());
    }

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SceneConfig {
            seed: 42,
            ..SceneConfig::default()
        };
        let a = gen_synthetic_scene(&cfg).unwrap();
        let b = gen_synthetic_scene(&cfg).unwrap();
        assert_eq!(a, b);
        let (pc, gts) = a;
        assert_eq!(gts.len(), 3);
        for (k, gt) in gts.iter().enumerate() {
            for p in &pc.points[k * cfg.points_per_box..(k + 1) * cfg.points_per_box] {
                assert!(gt.box3d_lidar.contains([p[0], p[1], p[2]]));
            }
        }
        for i in 0..gts.len() {
            for j in i + 1..gts.len() {
                assert_eq!(iou_bev(&gts[i].box3d_lidar, &gts[j].box3d_lidar), 0.0);
            }
        }
        for p in &pc.points {
            for a in 0..3 {
                assert!(p[a] >= cfg.range_min[a] && p[a] < cfg.range_max[a]);
            }
        }
    }

    #[test]
    fn crowded_scene_fails() {
        let cfg = SceneConfig {
            num_boxes: 40,
            ..SceneConfig::default()
        };
        assert!(matches!(gen_synthetic_scene(&cfg), Err(Error::Generation(_))));
    }
}
