//! Non-learned reference tracker: constant-velocity prediction with greedy
//! nearest-neighbor association. This is the floor the learned model is
//! benchmarked against; it reuses the learned tracker's life management so
//! metric deltas isolate the association mechanism.

use crate::geometry::{predict_box, Box3D};
use crate::graph::GraphBuildConfig;
use crate::matching::{greedy_match, AffinityTable};
use crate::tracker::{update_tracks, Track, TrackerConfig};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Source of per-class gating radii; `neighbor_radius` is unused here.
    pub graph: GraphBuildConfig,
    /// Frames a track may stay unmatched before deletion.
    pub max_age: usize,
    /// Score multiplier per unmatched frame.
    pub score_decay: f64,
    /// Emit coasting tracks, not just freshly matched ones.
    pub emit_inactive: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let t = TrackerConfig::default();
        BaselineConfig {
            graph: t.graph,
            max_age: t.max_age,
            score_decay: t.score_decay,
            emit_inactive: t.emit_inactive,
        }
    }
}

impl BaselineConfig {
    fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            max_age: self.max_age,
            score_decay: self.score_decay,
            emit_inactive: self.emit_inactive,
            // Baseline updates never consult the remaining knobs; the
            // defaults keep detector velocities in force (no velocity rows
            // are passed) and plain feature bookkeeping.
            graph: self.graph.clone(),
            ..TrackerConfig::default()
        }
    }
}

/// Tracks a sequence with constant-velocity prediction and greedy
/// nearest-neighbor matching.
///
/// Per frame: every live track is advanced by its detector velocity times
/// the time since its last match; detections, in descending score order,
/// claim the nearest predicted track of their own class within the class
/// radius. Spawn, aging, score decay, and deletion are the learned
/// tracker's rules. Returns the emitted tracks per frame.
pub fn cv_greedy_track(
    frames: &[Vec<Box3D>],
    frame_period: f64,
    cfg: &BaselineConfig,
) -> Result<Vec<Vec<Track>>> {
    if cfg.max_age == 0 {
        return Err(Error::config("max_age must be at least 1"));
    }
    if frame_period <= 0.0 {
        return Err(Error::config("frame_period must be positive"));
    }
    let radii = &cfg.graph.class_radii;
    let tracker_cfg = cfg.tracker_config();

    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 0;
    let mut out = Vec::with_capacity(frames.len());
    for (frame, dets) in frames.iter().enumerate() {
        if let Some(d) = dets.iter().find(|d| d.class_id >= radii.len()) {
            return Err(Error::config(format!(
                "frame {frame}: class id {} outside radius table of {}",
                d.class_id,
                radii.len()
            )));
        }

        // Affinity 1 - dist/radius: per detection all candidates share a
        // class, hence a radius, so ranking by affinity is ranking by
        // distance. Pairs at or beyond the radius are omitted.
        let mut entries = Vec::new();
        for (j, tr) in tracks.iter().enumerate() {
            let dt = (frame - tr.last_update_frame) as f64 * frame_period;
            let pred = predict_box(&tr.bbox, tr.velocity_est, dt);
            let radius = radii[tr.class_id] * cfg.graph.radius_multiplier;
            for (i, det) in dets.iter().enumerate() {
                if det.class_id != tr.class_id {
                    continue;
                }
                let dist = f64::hypot(
                    det.center[0] - pred.center[0],
                    det.center[1] - pred.center[1],
                );
                if dist < radius {
                    entries.push((j, i, 1.0 - dist / radius));
                }
            }
        }
        let table = AffinityTable {
            entries,
            detection_scores: dets.iter().map(|d| d.score).collect(),
            num_tracks: tracks.len(),
        };
        let m = greedy_match(&table, 0.0);
        let upd = update_tracks(
            &tracks,
            &m,
            dets,
            None,
            None,
            false,
            frame,
            &tracker_cfg,
            next_id,
        );
        tracks = upd.tracks;
        next_id = upd.next_id;
        out.push(
            tracks
                .iter()
                .filter(|t| cfg.emit_inactive || t.last_update_frame == frame)
                .cloned()
                .collect(),
        );
    }
    Ok(out)
}
