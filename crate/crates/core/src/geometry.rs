//! Yaw-rotated boxes in the LiDAR frame and convex polygon clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{cos, sin, wrap_angle};

/// 7-DoF box: geometric center, `(l, w, h)` along the box's own x/y/z axes,
/// and yaw about +z. `l` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        Box3D {
            center,
            dims,
            yaw: wrap_angle(yaw),
        }
    }

    /// Point expressed in the box frame (origin at the center, x along heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn from_local(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    /// Closed containment test: points on a face count as inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.dims[0] / 2.0 && q[1].abs() <= self.dims[1] / 2.0 && q[2].abs() <= self.dims[2] / 2.0
    }

    /// Containment in the BEV footprint, ignoring z.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let q = self.to_local([x, y, self.center[2]]);
        q[0].abs() <= self.dims[0] / 2.0 && q[1].abs() <= self.dims[1] / 2.0
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, l) in out.iter_mut().zip(local) {
            let p = self.from_local([l[0], l[1], 0.0]);
            *o = [p[0], p[1]];
        }
        out
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let h = [self.dims[0] / 2.0, self.dims[1] / 2.0, self.dims[2] / 2.0];
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 == 0 { 1.0 } else { -1.0 };
            let sz = if i & 4 == 0 { 1.0 } else { -1.0 };
            *o = self.from_local([sx * h[0], sy * h[1], sz * h[2]]);
        }
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.dims[2] / 2.0, self.center[2] + self.dims[2] / 2.0)
    }
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    (a / 2.0).abs()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clip of `subject` by the convex, counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = core::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two box footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    polygon_area(&clip_convex(&pa, &pb))
}
