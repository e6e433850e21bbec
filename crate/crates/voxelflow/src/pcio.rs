//! KITTI-format files: velodyne scans, label text, calibration and split lists.

use std::fs;
use std::path::{Path, PathBuf};

use voxelflow_core::detector::Detection;
use voxelflow_core::scene::{format_label_line, parse_calib, parse_label_line, Calib, ClassName, GroundTruth, PointCloud};

use crate::error::{Error, Result};

const POINT_BYTES: usize = 16;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decodes packed little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn decode_velodyne(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(format!("length {} is not a multiple of {POINT_BYTES}", bytes.len()));
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (i, chunk) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let mut p = [0.0; 4];
        for (a, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(format!("point {i} has a non-finite value"));
            }
            p[a] = f64::from(v);
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn encode_velodyne(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * POINT_BYTES);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    decode_velodyne(&read_bytes(path)?).map_err(|m| Error::format(path, m))
}

pub fn write_velodyne_bin(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_velodyne(pc)).map_err(|e| Error::io(path, e))
}

/// Parses label text. Blank lines are skipped; errors carry the 1-based line.
pub fn parse_labels(text: &str, calib: &Calib) -> std::result::Result<Vec<(GroundTruth, Option<f64>)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_label_line(line, calib).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(parsed);
    }
    Ok(out)
}

/// Ground truth from a label file. A trailing score column is ignored.
pub fn read_kitti_labels(path: impl AsRef<Path>, calib: &Calib) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let parsed = parse_labels(&read_text(path)?, calib).map_err(|m| Error::format(path, m))?;
    Ok(parsed.into_iter().map(|(g, _)| g).collect())
}

pub fn format_labels(gts: &[GroundTruth]) -> String {
    gts.iter().map(|g| format_label_line(g, None) + "\n").collect()
}

pub fn write_kitti_labels(path: impl AsRef<Path>, gts: &[GroundTruth]) -> Result<()> {
    write_text(path.as_ref(), &format_labels(gts))
}

/// Label annotation for a detection, camera fields derived through `calib`.
pub fn detection_to_label(d: &Detection, calib: &Calib) -> GroundTruth {
    let mut gt = GroundTruth::from_lidar_box(ClassName::from_class_id(d.class_id), d.box3d, 0, calib);
    gt.truncated = 0.0;
    gt
}

pub fn format_detections(dets: &[Detection], calib: &Calib) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format_label_line(&detection_to_label(d, calib), Some(d.score)));
        s.push('\n');
    }
    s
}

/// One label line with a trailing score per detection.
pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection], calib: &Calib) -> Result<()> {
    write_text(path.as_ref(), &format_detections(dets, calib))
}

/// Reads detections back. Lines without a score get score 1; classes outside
/// the detector's set are dropped.
pub fn read_detections(path: impl AsRef<Path>, calib: &Calib) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let parsed = parse_labels(&read_text(path)?, calib).map_err(|m| Error::format(path, m))?;
    Ok(parsed
        .into_iter()
        .filter_map(|(g, score)| {
            g.class_name.class_id().map(|class_id| Detection {
                box3d: g.box3d_lidar,
                class_id,
                score: score.unwrap_or(1.0),
            })
        })
        .collect())
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<Calib> {
    let path = path.as_ref();
    parse_calib(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Frame ids, one per line (e.g. `000123`).
pub fn read_index_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if id.contains(char::is_whitespace) || id.contains('/') {
            return Err(Error::format(path, format!("line {}: bad frame id '{id}'", i + 1)));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// Standard KITTI object layout under one root directory.
#[derive(Debug, Clone)]
pub struct KittiLayout {
    pub root: PathBuf,
}

impl KittiLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        KittiLayout { root: root.into() }
    }

    pub fn velodyne(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Calibration of a frame, or the nominal axis swap when the file is absent.
    pub fn calib_or_nominal(&self, id: &str) -> Result<Calib> {
        let p = self.calib(id);
        if p.exists() {
            read_calib(p)
        } else {
            Ok(Calib::nominal())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rejects_nan() {
        let mut b = Vec::new();
        for v in [1.0f32, f32::NAN, 0.0, 0.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert!(decode_velodyne(&b).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let pc = PointCloud::new(vec![[1.5, -2.25, 0.125, 0.5], [0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(decode_velodyne(&encode_velodyne(&pc)).unwrap(), pc);
    }

    #[test]
    fn label_error_names_line() {
        let text = "\nCar 0 0 0 1 2 3 4 1 1 1 0 0 5\n";
        let e = parse_labels(text, &Calib::nominal()).unwrap_err();
        assert!(e.starts_with("line 2:"), "{e}");
    }
}
