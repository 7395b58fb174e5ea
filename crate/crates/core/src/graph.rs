//! Sparse graph construction: the detection graph, the track graph, and the
//! bipartite track-to-detection association graph with its edge features.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::{center_distance, normalize_yaw, predict_box, Box3D};
use crate::simulator::ClassSpec;
use crate::{Error, Result};

/// Per-detection input feature layout:
/// center xyz, size wlh, yaw, velocity vx vy, one-hot class (K), score.
pub const DETECTION_FEATURE_BASE: usize = 10;

/// Association edge feature layout: Δcenter xyz, Δsize wlh, Δyaw,
/// frame difference, predicted-center distance.
pub const ASSOC_EDGE_FEATURES: usize = 9;

/// Directed sparse graph. For the detection and track graphs src and dst
/// index the same node set; for the association graph src indexes tracks and
/// dst indexes detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    pub num_src: usize,
    pub num_dst: usize,
    /// (src, dst) pairs, grouped by dst in ascending order.
    pub edges: Vec<(usize, usize)>,
    /// (E, 9) feature rows aligned with `edges`; association graph only.
    pub edge_features: Option<Tensor>,
}

impl SparseGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Destination index per edge, the segment map for attention softmax.
    pub fn dst_segments(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, d)| d).collect()
    }

    pub fn src_indices(&self) -> Vec<usize> {
        self.edges.iter().map(|&(s, _)| s).collect()
    }

    pub fn dst_indices(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, d)| d).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphBuildConfig {
    /// Class-agnostic truncation radius for detection and track graphs.
    pub neighbor_radius: f64,
    /// Per-class truncation radius for association edges, meters.
    pub class_radii: Vec<f64>,
    /// Scales class radii; ablation knob.
    pub radius_multiplier: f64,
    /// Disables distance gating on association edges (class gating stays).
    pub fully_connected_assoc: bool,
}

impl GraphBuildConfig {
    /// Radii derived from the class table: a class's association radius
    /// covers the farthest a track can travel while still alive
    /// (max_speed · frame_period · max_age) plus a 1 m margin; the
    /// class-agnostic radius is the largest of them.
    pub fn from_classes(classes: &[ClassSpec], frame_period: f64, max_age: usize) -> Self {
        let class_radii: Vec<f64> = classes
            .iter()
            .map(|c| c.max_speed * frame_period * max_age as f64 + 1.0)
            .collect();
        let neighbor_radius = class_radii.iter().cloned().fold(1.0f64, f64::max);
        GraphBuildConfig {
            neighbor_radius,
            class_radii,
            radius_multiplier: 1.0,
            fully_connected_assoc: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.neighbor_radius > 0.0) {
            return Err(Error::config(format!("neighbor_radius {} <= 0", self.neighbor_radius)));
        }
        if self.class_radii.is_empty() {
            return Err(Error::config("class_radii must not be empty"));
        }
        if self.class_radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("class radius <= 0"));
        }
        if !(self.radius_multiplier > 0.0) {
            return Err(Error::config(format!(
                "radius_multiplier {} <= 0",
                self.radius_multiplier
            )));
        }
        Ok(())
    }
}

/// Radii for the benchmark class table at its 2 Hz frame rate and the
/// default 3-frame track age.
impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig::from_classes(&crate::simulator::benchmark_classes(), 0.5, 3)
    }
}

/// Symmetric proximity graph with self-loops over one set of boxes: both
/// directions of every pair within `radius`, plus (i, i) for every node, so
/// every node has at least one incoming edge.
fn proximity_graph(boxes: &[Box3D], radius: f64) -> SparseGraph {
    let n = boxes.len();
    let mut edges = Vec::new();
    for dst in 0..n {
        for src in 0..n {
            if src == dst || center_distance(&boxes[src], &boxes[dst]) <= radius {
                edges.push((src, dst));
            }
        }
    }
    SparseGraph { num_src: n, num_dst: n, edges, edge_features: None }
}

/// Detection graph over the current frame's detections.
pub fn build_detection_graph(dets: &[Box3D], cfg: &GraphBuildConfig) -> SparseGraph {
    proximity_graph(dets, cfg.neighbor_radius)
}

/// Track graph over track boxes predicted to the current timestamp.
/// `predicted` must already be extrapolated; an empty slice yields the empty
/// graph (first frame, encoder skipped).
pub fn build_track_graph(predicted: &[Box3D], cfg: &GraphBuildConfig) -> SparseGraph {
    proximity_graph(predicted, cfg.neighbor_radius)
}

/// Bipartite association graph from tracks to detections.
///
/// `track_boxes[j]` is track j's last observed box, its `frame` the frame of
/// that observation and its `velocity` the track's current motion estimate.
/// An edge j -> i requires matching classes and, unless fully connected, a
/// predicted-center distance within the class radius. Features measure the
/// detection against the track's original (unpredicted) box.
pub fn build_association_graph(
    track_boxes: &[Box3D],
    dets: &[Box3D],
    cfg: &GraphBuildConfig,
    current_frame: usize,
    frame_period: f64,
) -> Result<SparseGraph> {
    cfg.validate()?;
    let mut edges = Vec::new();
    let mut features = Vec::new();
    for (di, det) in dets.iter().enumerate() {
        for (tj, track) in track_boxes.iter().enumerate() {
            if track.class_id != det.class_id {
                continue;
            }
            debug_assert!(
                track.frame < current_frame,
                "track updated at {} but current frame is {current_frame}",
                track.frame
            );
            let frame_diff = (current_frame - track.frame) as f64;
            let predicted = predict_box(track, track.velocity, frame_diff * frame_period);
            let pred_dist = center_distance(&predicted, det);
            let radius = cfg
                .class_radii
                .get(track.class_id)
                .copied()
                .ok_or_else(|| {
                    Error::config(format!("no class radius for class {}", track.class_id))
                })?
                * cfg.radius_multiplier;
            if !cfg.fully_connected_assoc && pred_dist > radius {
                continue;
            }
            edges.push((tj, di));
            features.extend_from_slice(&[
                det.center[0] - track.center[0],
                det.center[1] - track.center[1],
                det.center[2] - track.center[2],
                det.size[0] - track.size[0],
                det.size[1] - track.size[1],
                det.size[2] - track.size[2],
                normalize_yaw(det.yaw - track.yaw),
                frame_diff,
                pred_dist,
            ]);
        }
    }
    let num_edges = edges.len();
    Ok(SparseGraph {
        num_src: track_boxes.len(),
        num_dst: dets.len(),
        edges,
        edge_features: Some(Tensor::from_vec(num_edges, ASSOC_EDGE_FEATURES, features)?),
    })
}

/// Raw per-detection feature matrix (N, 10 + K). Centers are expressed
/// relative to `origin` (the scene's first-frame detection centroid) to keep
/// magnitudes bounded; everything else is taken as-is.
pub fn detection_node_features(
    dets: &[Box3D],
    num_classes: usize,
    origin: [f64; 2],
) -> Result<Tensor> {
    let dim = DETECTION_FEATURE_BASE + num_classes;
    let mut data = Vec::with_capacity(dets.len() * dim);
    for d in dets {
        if d.class_id >= num_classes {
            return Err(Error::config(format!(
                "class id {} outside table of {num_classes}",
                d.class_id
            )));
        }
        data.extend_from_slice(&[
            d.center[0] - origin[0],
            d.center[1] - origin[1],
            d.center[2],
            d.size[0],
            d.size[1],
            d.size[2],
            d.yaw,
            d.velocity[0],
            d.velocity[1],
        ]);
        for k in 0..num_classes {
            data.push(if k == d.class_id { 1.0 } else { 0.0 });
        }
        data.push(d.score);
    }
    Tensor::from_vec(dets.len(), dim, data)
}

/// Ground-plane centroid of a detection list; the scene-local origin is the
/// first frame's value.
pub fn detection_centroid(dets: &[Box3D]) -> [f64; 2] {
    if dets.is_empty() {
        return [0.0, 0.0];
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for d in dets {
        cx += d.center[0];
        cy += d.center[1];
    }
    [cx / dets.len() as f64, cy / dets.len() as f64]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, class_id: usize, frame: usize) -> Box3D {
        Box3D::new(
            [x, y, 1.0],
            [2.0, 4.0, 1.5],
            0.0,
            [0.0, 0.0],
            class_id,
            0.9,
            frame,
            frame as f64 * 0.5,
        )
    }

    fn test_cfg() -> GraphBuildConfig {
        GraphBuildConfig {
            neighbor_radius: 10.0,
            class_radii: vec![15.0, 5.0, 12.0],
            radius_multiplier: 1.0,
            fully_connected_assoc: false,
        }
    }

    #[test]
    fn single_detection_gets_only_its_self_loop() {
        let g = build_detection_graph(&[det(0.0, 0.0, 0, 0)], &test_cfg());
        assert_eq!(g.num_src, 1);
        assert_eq!(g.edges, vec![(0, 0)]);
    }

    #[test]
    fn near_pair_gets_both_directions() {
        let g = build_detection_graph(&[det(0.0, 0.0, 0, 0), det(5.0, 0.0, 0, 0)], &test_cfg());
        let set: std::collections::HashSet<_> = g.edges.iter().copied().collect();
        assert_eq!(
            set,
            [(0, 0), (1, 1), (0, 1), (1, 0)].into_iter().collect::<std::collections::HashSet<_>>()
        );
    }

    #[test]
    fn far_tracks_keep_only_self_loops() {
        let tracks = vec![det(0.0, 0.0, 0, 0), det(50.0, 0.0, 0, 0)];
        let g = build_track_graph(&tracks, &test_cfg());
        assert_eq!(g.edges, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn empty_track_set_builds_empty_graph() {
        let g = build_track_graph(&[], &test_cfg());
        assert_eq!(g.num_src, 0);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn proximity_edges_match_quadratic_oracle() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let dets: Vec<Box3D> =
            (0..20).map(|i| det(next() * 40.0, next() * 40.0, i % 3, 0)).collect();
        let cfg = test_cfg();
        let g = build_detection_graph(&dets, &cfg);
        let got: std::collections::HashSet<_> = g.edges.iter().copied().collect();
        assert_eq!(got.len(), g.edges.len(), "duplicate edges");

        for i in 0..dets.len() {
            for j in 0..dets.len() {
                let expect = i == j
                    || center_distance(&dets[i], &dets[j]) <= cfg.neighbor_radius;
                assert_eq!(got.contains(&(i, j)), expect, "edge ({i}, {j})");
            }
        }
    }

    #[test]
    fn association_edge_at_identical_position_has_zero_features() {
        let mut track = det(3.0, 4.0, 1, 0);
        track.velocity = [0.0, 0.0];
        let d = det(3.0, 4.0, 1, 1);
        let g =
            build_association_graph(&[track], &[d], &test_cfg(), 1, 0.5).unwrap();
        assert_eq!(g.edges, vec![(0, 0)]);
        let f = g.edge_features.as_ref().unwrap();
        let row = f.row(0);
        for (i, &v) in row.iter().enumerate() {
            match i {
                7 => assert_eq!(v, 1.0, "frame difference"),
                _ => assert_eq!(v, 0.0, "feature {i}"),
            }
        }
    }

    #[test]
    fn class_gate_blocks_cross_class_edges() {
        let track = det(3.0, 4.0, 0, 0);
        let d = det(3.0, 4.0, 1, 1);
        let g = build_association_graph(&[track], &[d], &test_cfg(), 1, 0.5).unwrap();
        assert!(g.edges.is_empty());

        // Fully connected mode still keeps the class gate.
        let mut cfg = test_cfg();
        cfg.fully_connected_assoc = true;
        let g = build_association_graph(&[track], &[d], &cfg, 1, 0.5).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn association_matches_exhaustive_reference_builder() {
        // Reference: plain double loop recomputing gates and features from
        // the definitions.
        fn reference(
            tracks: &[Box3D],
            dets: &[Box3D],
            cfg: &GraphBuildConfig,
            frame: usize,
            period: f64,
        ) -> (Vec<(usize, usize)>, Vec<[f64; 9]>) {
            let mut edges = Vec::new();
            let mut feats = Vec::new();
            for (di, d) in dets.iter().enumerate() {
                for (tj, t) in tracks.iter().enumerate() {
                    if t.class_id != d.class_id {
                        continue;
                    }
                    let fd = (frame - t.frame) as f64;
                    let px = t.center[0] + t.velocity[0] * fd * period;
                    let py = t.center[1] + t.velocity[1] * fd * period;
                    let dist = ((d.center[0] - px).powi(2) + (d.center[1] - py).powi(2)).sqrt();
                    if !cfg.fully_connected_assoc
                        && dist > cfg.class_radii[t.class_id] * cfg.radius_multiplier
                    {
                        continue;
                    }
                    edges.push((tj, di));
                    feats.push([
                        d.center[0] - t.center[0],
                        d.center[1] - t.center[1],
                        d.center[2] - t.center[2],
                        d.size[0] - t.size[0],
                        d.size[1] - t.size[1],
                        d.size[2] - t.size[2],
                        normalize_yaw(d.yaw - t.yaw),
                        fd,
                        dist,
                    ]);
                }
            }
            (edges, feats)
        }

        let mut state = 1234u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..30 {
            let nt = 1 + trial % 6;
            let nd = 1 + (trial / 2) % 7;
            let tracks: Vec<Box3D> = (0..nt)
                .map(|i| {
                    let mut b = det(next() * 30.0, next() * 30.0, i % 3, trial % 3);
                    b.velocity = [next() * 8.0 - 4.0, next() * 8.0 - 4.0];
                    b.yaw = next() * 3.0 - 1.5;
                    b
                })
                .collect();
            let frame = (trial % 3) + 1 + (trial % 2);
            let dets: Vec<Box3D> = (0..nd)
                .map(|i| {
                    let mut b = det(next() * 30.0, next() * 30.0, i % 3, frame);
                    b.yaw = next() * 3.0 - 1.5;
                    b
                })
                .collect();
            let mut cfg = test_cfg();
            cfg.fully_connected_assoc = trial % 5 == 0;
            cfg.radius_multiplier = if trial % 4 == 0 { 0.5 } else { 1.0 };

            let g = build_association_graph(&tracks, &dets, &cfg, frame, 0.5).unwrap();
            let (ref_edges, ref_feats) = reference(&tracks, &dets, &cfg, frame, 0.5);
            assert_eq!(g.edges, ref_edges, "trial {trial}");
            let f = g.edge_features.as_ref().unwrap();
            for (e, rf) in ref_feats.iter().enumerate() {
                for (k, &v) in rf.iter().enumerate() {
                    assert!(
                        (f.at(e, k) - v).abs() < 1e-12,
                        "trial {trial} edge {e} feature {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn node_features_layout_and_one_hot() {
        let dets = vec![det(10.0, -4.0, 2, 3), det(0.0, 0.0, 0, 3)];
        let f = detection_node_features(&dets, 3, [1.0, 1.0]).unwrap();
        assert_eq!((f.rows, f.cols), (2, 13));
        let row = f.row(0);
        assert_eq!(row[0], 9.0);
        assert_eq!(row[1], -5.0);
        assert_eq!(row[2], 1.0);
        assert_eq!(&row[3..6], &[2.0, 4.0, 1.5]);
        let one_hot = &row[9..12];
        assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
        assert_eq!(one_hot[2], 1.0);
        assert_eq!(row[12], 0.9);

        assert!(detection_node_features(&dets, 2, [0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn association_is_bipartite_and_valid(seed in 0u64..300) {
            let mut state = seed.wrapping_mul(0x9e3779b9).wrapping_add(11);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let nt = (seed as usize) % 5;
            let nd = 1 + (seed as usize / 3) % 6;
            let tracks: Vec<Box3D> = (0..nt)
                .map(|i| det(next() * 50.0, next() * 50.0, i % 3, 0))
                .collect();
            let dets: Vec<Box3D> = (0..nd)
                .map(|i| det(next() * 50.0, next() * 50.0, i % 3, 2))
                .collect();
            let g = build_association_graph(&tracks, &dets, &test_cfg(), 2, 0.5).unwrap();
            for &(s, d) in &g.edges {
                prop_assert!(s < nt, "src out of range");
                prop_assert!(d < nd, "dst out of range");
                prop_assert_eq!(tracks[s].class_id, dets[d].class_id);
            }
            let feats = g.edge_features.as_ref().unwrap();
            prop_assert_eq!(feats.rows, g.edges.len());
            for e in 0..feats.rows {
                prop_assert!(feats.at(e, 7) >= 1.0, "frame diff under 1");
                prop_assert!(feats.at(e, 8) >= 0.0, "negative predicted distance");
            }
        }

        #[test]
        fn growing_radius_multiplier_never_drops_edges(seed in 0u64..200,
                                                       small in 0.2..1.0f64,
                                                       extra in 0.0..3.0f64) {
            let mut state = seed.wrapping_mul(2654435761).wrapping_add(17);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let tracks: Vec<Box3D> = (0..4)
                .map(|i| {
                    let mut b = det(next() * 40.0, next() * 40.0, i % 3, 0);
                    b.velocity = [next() * 6.0 - 3.0, next() * 6.0 - 3.0];
                    b
                })
                .collect();
            let dets: Vec<Box3D> = (0..6)
                .map(|i| det(next() * 40.0, next() * 40.0, i % 3, 1))
                .collect();
            let mut cfg = test_cfg();
            cfg.radius_multiplier = small;
            let g_small = build_association_graph(&tracks, &dets, &cfg, 1, 0.5).unwrap();
            cfg.radius_multiplier = small + extra;
            let g_large = build_association_graph(&tracks, &dets, &cfg, 1, 0.5).unwrap();
            let large: std::collections::HashSet<_> = g_large.edges.iter().copied().collect();
            for e in &g_small.edges {
                prop_assert!(large.contains(e), "edge {e:?} vanished as radius grew");
            }
        }

        #[test]
        fn edge_features_are_translation_invariant(seed in 0u64..200,
                                                   tx in -100.0..100.0f64,
                                                   ty in -100.0..100.0f64) {
            let mut state = seed.wrapping_mul(0x45d9f3b).wrapping_add(29);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let translate = |b: &Box3D| {
                let mut o = *b;
                o.center[0] += tx;
                o.center[1] += ty;
                o
            };
            let tracks: Vec<Box3D> = (0..3)
                .map(|i| {
                    let mut b = det(next() * 30.0, next() * 30.0, i % 3, 0);
                    b.velocity = [next() * 4.0 - 2.0, next() * 4.0 - 2.0];
                    b
                })
                .collect();
            let dets: Vec<Box3D> = (0..5)
                .map(|i| det(next() * 30.0, next() * 30.0, i % 3, 1))
                .collect();
            let g = build_association_graph(&tracks, &dets, &test_cfg(), 1, 0.5).unwrap();
            let tracks2: Vec<Box3D> = tracks.iter().map(&translate).collect();
            let dets2: Vec<Box3D> = dets.iter().map(&translate).collect();
            let g2 = build_association_graph(&tracks2, &dets2, &test_cfg(), 1, 0.5).unwrap();
            prop_assert_eq!(&g.edges, &g2.edges);
            let (fa, fb) = (g.edge_features.as_ref().unwrap(), g2.edge_features.as_ref().unwrap());
            for (a, b) in fa.data.iter().zip(fb.data.iter()) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
