//! Oriented boxes and rotated-rectangle intersection.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

/// Oriented 3D box. `l` runs along the heading `theta` (the x axis when
/// `theta = 0`), `w` across it, `h` vertically; `(x, y, z)` is the center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

/// A predicted box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

const COLLINEAR_TOL: f64 = 1e-9;

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Self {
        Box3D { x, y, z, w, l, h, theta }
    }

    fn degenerate(&self) -> bool {
        !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0)
            || ![self.x, self.y, self.z, self.w, self.l, self.h, self.theta].iter().all(|v| v.is_finite())
    }

    /// Footprint corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = (math::sin(self.theta), math::cos(self.theta));
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    pub fn area_bev(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn radius_bev(&self) -> f64 {
        0.5 * math::sqrt(self.w * self.w + self.l * self.l)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s.abs()
}

/// Intersection of `subject` with a convex counter-clockwise `clip`
/// polygon by successive half-plane clipping.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = core::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let cp = cross(a, b, p);
            let cq = cross(a, b, q);
            let p_in = cp >= -COLLINEAR_TOL;
            let q_in = cq >= -COLLINEAR_TOL;
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Footprint intersection area of two boxes.
pub fn intersection_area_bev(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let r = a.radius_bev() + b.radius_bev();
    if dx * dx + dy * dy >= r * r {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners_bev(), &b.corners_bev()))
}

/// Bird's-eye-view IoU of the two footprints; 0 for degenerate boxes.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if a.degenerate() || b.degenerate() {
        return 0.0;
    }
    let inter = intersection_area_bev(a, b);
    let union = a.area_bev() + b.area_bev() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a.degenerate() || b.degenerate() {
        return 0.0;
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = intersection_area_bev(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
