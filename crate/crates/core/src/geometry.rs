//! Oriented 3D box math: IoU, center distance, NMS and constant-velocity
//! prediction.
//!
//! Boxes live on the ground plane: yaw rotates about the z axis, the length
//! axis points along the heading. IoU is the bird's-eye-view polygon
//! intersection (Sutherland-Hodgman clipping) times the vertical overlap,
//! divided by the union volume.

use serde::{Deserialize, Serialize};

/// A detected or annotated oriented 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Center position (x, y, z) in meters.
    pub center: [f64; 3],
    /// Extent (w, l, h) in meters; strictly positive. `l` runs along the
    /// heading, `w` across it.
    pub size: [f64; 3],
    /// Heading about z in radians, normalized to (-pi, pi].
    pub yaw: f64,
    /// Ground-plane velocity (vx, vy) in m/s.
    pub velocity: [f64; 2],
    /// Index into the class table.
    pub class_id: usize,
    /// Detection confidence in [0, 1].
    pub score: f64,
    /// Frame index the box belongs to.
    pub frame: usize,
    /// Time of the frame in seconds.
    pub timestamp: f64,
}

impl Box3D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
        velocity: [f64; 2],
        class_id: usize,
        score: f64,
        frame: usize,
        timestamp: f64,
    ) -> Self {
        debug_assert!(size.iter().all(|s| *s > 0.0), "box size must be positive");
        debug_assert!((0.0..=1.0).contains(&score), "score must be in [0, 1]");
        Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            velocity,
            class_id,
            score,
            frame,
            timestamp,
        }
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hw, hl) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, p) in out.iter_mut().zip(local.iter()) {
            o[0] = self.center[0] + c * p[0] - s * p[1];
            o[1] = self.center[1] + s * p[0] + c * p[1];
        }
        out
    }

    /// Vertical extent [z_min, z_max].
    pub fn z_interval(&self) -> [f64; 2] {
        let hh = self.size[2] / 2.0;
        [self.center[2] - hh, self.center[2] + hh]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = yaw % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc / 2.0
}

/// Clip a polygon against the half-plane left of the directed edge a -> b.
fn clip_half_plane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in != prev_in {
            // Intersection of segment prev->cur with the edge line.
            let d1 = (b[0] - a[0]) * (prev[1] - a[1]) - (b[1] - a[1]) * (prev[0] - a[0]);
            let d2 = (b[0] - a[0]) * (cur[1] - a[1]) - (b[1] - a[1]) * (cur[0] - a[0]);
            let t = d1 / (d1 - d2);
            out.push([
                prev[0] + t * (cur[0] - prev[0]),
                prev[1] + t * (cur[1] - prev[1]),
            ]);
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

/// Intersection area of two convex CCW polygons (Sutherland-Hodgman).
pub fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_half_plane(&poly, clip[i], clip[(i + 1) % clip.len()]);
    }
    polygon_area(&poly).max(0.0)
}

/// Yaw-aware 3D IoU: BEV polygon intersection times vertical overlap over
/// union volume. Symmetric; 0 for disjoint supports.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let za = a.z_interval();
    let zb = b.z_interval();
    let dz = (za[1].min(zb[1]) - za[0].max(zb[0])).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.bev_corners(), &b.bev_corners());
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between ground-plane (x, y) centers.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    (dx * dx + dy * dy).sqrt()
}

/// Greedy score-descending non-maximum suppression, class-agnostic.
///
/// A box is kept iff its IoU with every already-kept box is <= the threshold.
/// Score ties break by original index so the result is deterministic.
pub fn nms(detections: &[Box3D], iou_threshold: f64) -> Vec<Box3D> {
    nms_indices(detections, iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// Original indices kept by [`nms`], in the same score-descending keep order.
/// Lets callers carry per-detection side data (labels) through suppression.
pub fn nms_indices(detections: &[Box3D], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score
            .partial_cmp(&detections[i].score)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let cand = &detections[i];
        if kept.iter().all(|&k| iou_3d(&detections[k], cand) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Advance a box by a constant ground-plane velocity for `dt` seconds.
pub fn predict_box(b: &Box3D, velocity: [f64; 2], dt: f64) -> Box3D {
    let mut out = *b;
    out.center[0] += velocity[0] * dt;
    out.center[1] += velocity[1] * dt;
    out
}
