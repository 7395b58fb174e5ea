//! Online tracking loop: per-frame inference, hidden-state carry, and the
//! spawn/termination state machine.
//!
//! The per-frame pipeline (suppress, embed, encode tracks, build graphs,
//! decode, score, match, update) lives in [`forward_frame`] and
//! [`update_tracks`] so training can drive the exact same code path with
//! gradients on a shared tape, while [`Tracker`] runs it frame-by-frame on a
//! throwaway tape for inference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::geometry::{nms_indices, predict_box, Box3D};
use crate::graph::{
    build_association_graph, build_detection_graph, build_track_graph, detection_centroid,
    detection_node_features, GraphBuildConfig, SparseGraph, ASSOC_EDGE_FEATURES,
};
use crate::matching::{greedy_match, hungarian, AffinityTable, MatchResult};
use crate::model::{Dropout, Model};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    /// Hidden state fed to the next frame's encoder, length d. Left empty
    /// while training keeps features on the tape instead.
    pub feature: Vec<f64>,
    /// Last associated detection's box; its `frame` field stays at the last
    /// match, which is what the association features measure age against.
    pub bbox: Box3D,
    /// (vx, vy) m/s used to predict this track forward; mirrors
    /// `bbox.velocity`.
    pub velocity_est: [f64; 2],
    pub last_update_frame: usize,
    pub age_since_match: usize,
    pub class_id: usize,
    pub score: f64,
    /// Ground-truth identity of the spawning detection, when labels were
    /// supplied (training and the guided-matching ablation). None for tracks
    /// born from false positives; fixed for the track's lifetime.
    pub gt_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Frames a track may stay unmatched before deletion.
    pub max_age: usize,
    /// Affinities must exceed this to produce a match.
    pub min_affinity: f64,
    /// Score multiplier per unmatched frame.
    pub score_decay: f64,
    /// IoU threshold for pre-matching detection suppression.
    pub nms_iou: f64,
    /// Also emit coasting tracks in per-frame output.
    pub emit_inactive: bool,
    /// Replace greedy matching with a min-cost assignment.
    pub use_hungarian: bool,
    /// Match by ground-truth identity instead of affinity (needs labels).
    pub gt_identity_guided: bool,
    /// Reset track features to detection embeddings instead of carrying
    /// decoder outputs across frames.
    pub no_hidden_state: bool,
    /// Feed zeros instead of geometric association edge features.
    pub zero_edge_features: bool,
    /// Keep detector velocities instead of the regressed estimates.
    pub no_velocity_head: bool,
    pub graph: GraphBuildConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            max_age: 3,
            min_affinity: 0.5,
            score_decay: 0.9,
            nms_iou: 0.1,
            emit_inactive: false,
            use_hungarian: false,
            gt_identity_guided: false,
            no_hidden_state: false,
            zero_edge_features: false,
            no_velocity_head: false,
            graph: GraphBuildConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_age == 0 {
            return Err(Error::config("max_age must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.min_affinity) {
            return Err(Error::config(format!(
                "min_affinity {} outside [0, 1)",
                self.min_affinity
            )));
        }
        if !(self.score_decay > 0.0 && self.score_decay <= 1.0) {
            return Err(Error::config(format!(
                "score_decay {} outside (0, 1]",
                self.score_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        self.graph.validate()
    }
}

/// Where an updated track's hidden state comes from, as a row reference into
/// the current frame's tensors. Keeps the update rule identical between
/// inference (rows copied out of tape values) and training (rows gathered on
/// the tape so gradients flow).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Row of the decoder's detection output h_D.
    DecodedDet(usize),
    /// Row of the detection embedding (no_hidden_state ablation).
    EmbeddedDet(usize),
    /// Row of this frame's encoded track features h_T.
    EncodedTrack(usize),
    /// Row of the previous feature matrix, carried unchanged (empty frames
    /// and unmatched tracks under no_hidden_state).
    PrevTrack(usize),
}

/// Result of one track update: refreshed metadata plus, per output track,
/// where its feature row lives. `tracks[i].feature` is left empty; callers
/// materialize it from `sources[i]`.
#[derive(Debug, Clone)]
pub struct TrackUpdate {
    pub tracks: Vec<Track>,
    pub sources: Vec<FeatureSource>,
    pub next_id: u64,
}

/// Applies one frame's match outcome to the track set.
///
/// Matched tracks keep their id and adopt the detection's box and score with
/// age reset; unmatched detections spawn tracks with fresh monotone ids;
/// unmatched tracks age, decay their score, and are dropped once their age
/// reaches `max_age`. Velocity estimates (rows of `velocities`) overwrite
/// detector velocities unless the ablation disables that. `network_ran`
/// distinguishes a real forward pass (unmatched tracks adopt their encoded
/// features) from a skipped one on an empty frame (features carry over).
#[allow(clippy::too_many_arguments)]
pub fn update_tracks(
    prev: &[Track],
    m: &MatchResult,
    dets: &[Box3D],
    labels: Option<&[Option<u64>]>,
    velocities: Option<&Tensor>,
    network_ran: bool,
    frame: usize,
    cfg: &TrackerConfig,
    mut next_id: u64,
) -> TrackUpdate {
    let mut det_of_track: HashMap<usize, usize> = HashMap::new();
    for &(d, tj) in &m.pairs {
        det_of_track.insert(tj, d);
    }
    let det_velocity = |d: usize| -> [f64; 2] {
        match velocities {
            Some(v) if !cfg.no_velocity_head => [v.at(d, 0), v.at(d, 1)],
            _ => dets[d].velocity,
        }
    };

    let mut tracks = Vec::with_capacity(prev.len() + m.unmatched_detections.len());
    let mut sources = Vec::with_capacity(tracks.capacity());
    for (j, tr) in prev.iter().enumerate() {
        if let Some(&d) = det_of_track.get(&j) {
            debug_assert_eq!(tr.class_id, dets[d].class_id, "matched across classes");
            let vel = det_velocity(d);
            let mut bbox = dets[d];
            bbox.velocity = vel;
            tracks.push(Track {
                id: tr.id,
                feature: Vec::new(),
                bbox,
                velocity_est: vel,
                last_update_frame: frame,
                age_since_match: 0,
                class_id: dets[d].class_id,
                score: dets[d].score,
                // identity is fixed at spawn; later matches never relabel
                gt_id: tr.gt_id,
            });
            sources.push(if cfg.no_hidden_state {
                FeatureSource::EmbeddedDet(d)
            } else {
                FeatureSource::DecodedDet(d)
            });
        } else {
            let age = tr.age_since_match + 1;
            if age >= cfg.max_age {
                continue;
            }
            let mut aged = tr.clone();
            aged.feature = Vec::new();
            aged.age_since_match = age;
            aged.score *= cfg.score_decay;
            tracks.push(aged);
            sources.push(if network_ran && !cfg.no_hidden_state {
                FeatureSource::EncodedTrack(j)
            } else {
                FeatureSource::PrevTrack(j)
            });
        }
    }
    for &d in &m.unmatched_detections {
        let vel = det_velocity(d);
        let mut bbox = dets[d];
        bbox.velocity = vel;
        tracks.push(Track {
            id: next_id,
            feature: Vec::new(),
            bbox,
            velocity_est: vel,
            last_update_frame: frame,
            age_since_match: 0,
            class_id: dets[d].class_id,
            score: dets[d].score,
            gt_id: labels.and_then(|ls| ls[d]),
        });
        sources.push(if cfg.no_hidden_state {
            FeatureSource::EmbeddedDet(d)
        } else {
            FeatureSource::DecodedDet(d)
        });
        next_id += 1;
    }
    TrackUpdate { tracks, sources, next_id }
}

/// Everything the per-frame forward pass produces that matching and the
/// track update consume. Node handles stay valid until the owning tape is
/// cleared.
pub struct FrameForward {
    /// h_D^(0), detection embeddings (N, d).
    pub det_embed: NodeId,
    /// h_T after the encoder (rows align with the input tracks).
    pub track_enc: NodeId,
    /// h_D after the decoder.
    pub det_out: NodeId,
    /// h_A after the decoder (rows align with `assoc.edges`).
    pub edge_out: NodeId,
    /// Affinity logits (E, 1).
    pub affinity_logits: NodeId,
    /// sigmoid(logits), copied out for the matcher.
    pub affinity: Vec<f64>,
    /// Velocity head output (N, 2).
    pub velocities: NodeId,
    pub assoc: SparseGraph,
}

/// One frame's network pass over post-suppression detections. Builds the
/// track, detection, and association graphs, runs encoder, decoder, and both
/// heads. `track_feats` must hold one d-row per track.
#[allow(clippy::too_many_arguments)]
pub fn forward_frame(
    model: &Model,
    cfg: &TrackerConfig,
    t: &mut Tape,
    tracks: &[Track],
    track_feats: NodeId,
    dets: &[Box3D],
    frame: usize,
    frame_period: f64,
    origin: [f64; 2],
    drop: &mut Dropout,
) -> Result<FrameForward> {
    let raw = detection_node_features(dets, model.cfg.num_classes, origin)?;
    let raw = t.constant(raw);
    let det_embed = model.embed_detections(t, raw, drop)?;

    let predicted: Vec<Box3D> = tracks
        .iter()
        .map(|tr| {
            let dt = (frame - tr.last_update_frame) as f64 * frame_period;
            predict_box(&tr.bbox, tr.velocity_est, dt)
        })
        .collect();
    let track_graph = build_track_graph(&predicted, &cfg.graph);
    let track_enc = model.encode_tracks(t, track_feats, &track_graph, drop)?;

    let det_graph = build_detection_graph(dets, &cfg.graph);
    let track_boxes: Vec<Box3D> = tracks.iter().map(|tr| tr.bbox).collect();
    let assoc = build_association_graph(&track_boxes, dets, &cfg.graph, frame, frame_period)?;
    let edge_feats = if cfg.zero_edge_features {
        Tensor::zeros(assoc.num_edges(), ASSOC_EDGE_FEATURES)
    } else {
        assoc.edge_features.clone().expect("association graph carries features")
    };
    let er = t.constant(edge_feats);
    let edge_embed = model.embed_edges(t, er, drop)?;

    let (det_out, edge_out) =
        model.decode(t, det_embed, &det_graph, track_enc, &assoc, edge_embed, drop)?;
    let affinity_logits = model.affinity_head(t, edge_out)?;
    let probs = t.sigmoid(affinity_logits)?;
    let affinity = t.value(probs).data.clone();
    let velocities = model.velocity_head(t, det_out)?;

    Ok(FrameForward {
        det_embed,
        track_enc,
        det_out,
        edge_out,
        affinity_logits,
        affinity,
        velocities,
        assoc,
    })
}

/// Affinity table for the matcher, entries in association edge order.
pub fn affinity_table(assoc: &SparseGraph, affinity: &[f64], dets: &[Box3D]) -> AffinityTable {
    AffinityTable {
        entries: assoc
            .edges
            .iter()
            .zip(affinity.iter())
            .map(|(&(tj, di), &a)| (tj, di, a))
            .collect(),
        detection_scores: dets.iter().map(|d| d.score).collect(),
        num_tracks: assoc.num_src,
    }
}

/// Min-cost assignment over the affinity table: cost 1 - affinity, pairs at
/// or below `min_affinity` forbidden. Maximum cardinality first, then
/// minimum cost, matching the greedy matcher's threshold semantics.
pub fn hungarian_match(table: &AffinityTable, num_dets: usize, min_affinity: f64) -> MatchResult {
    let mut cost = vec![vec![0.0; table.num_tracks]; num_dets];
    let mut forbid = vec![vec![true; table.num_tracks]; num_dets];
    for &(tj, di, a) in &table.entries {
        if a > min_affinity {
            cost[di][tj] = 1.0 - a;
            forbid[di][tj] = false;
        }
    }
    let pairs = hungarian(&cost, &forbid);
    let mut det_used = vec![false; num_dets];
    let mut track_used = vec![false; table.num_tracks];
    for &(d, tj) in &pairs {
        det_used[d] = true;
        track_used[tj] = true;
    }
    MatchResult {
        pairs,
        unmatched_detections: (0..num_dets).filter(|&d| !det_used[d]).collect(),
        unmatched_tracks: (0..table.num_tracks).filter(|&t| !track_used[t]).collect(),
    }
}

/// Identity-oracle matching: each detection binds to the live track whose
/// ground-truth id equals its label. Detections go score-descending;
/// candidate ties prefer the most recently matched track, then the smaller
/// id. Labelless detections and tracks never match.
pub fn guided_match(tracks: &[Track], dets: &[Box3D], labels: &[Option<u64>]) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    let mut taken = vec![false; tracks.len()];
    let mut result = MatchResult::default();
    for d in order {
        let Some(g) = labels[d] else {
            result.unmatched_detections.push(d);
            continue;
        };
        let best = tracks
            .iter()
            .enumerate()
            .filter(|(j, tr)| !taken[*j] && tr.gt_id == Some(g))
            .min_by_key(|(_, tr)| (tr.age_since_match, tr.id));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                result.pairs.push((d, j));
            }
            None => result.unmatched_detections.push(d),
        }
    }
    result.pairs.sort_by_key(|&(d, _)| d);
    result.unmatched_detections.sort_unstable();
    result.unmatched_tracks = (0..tracks.len()).filter(|&j| !taken[j]).collect();
    result
}

/// Copies each track's feature row out of the frame tensors per its source.
pub fn materialize_features(
    sources: &[FeatureSource],
    det_out: Option<&Tensor>,
    det_embed: Option<&Tensor>,
    track_enc: Option<&Tensor>,
    prev: &[Track],
) -> Vec<Vec<f64>> {
    sources
        .iter()
        .map(|src| match *src {
            FeatureSource::DecodedDet(i) => det_out.expect("decoder ran").row(i).to_vec(),
            FeatureSource::EmbeddedDet(i) => det_embed.expect("embedding ran").row(i).to_vec(),
            FeatureSource::EncodedTrack(i) => track_enc.expect("encoder ran").row(i).to_vec(),
            FeatureSource::PrevTrack(i) => prev[i].feature.clone(),
        })
        .collect()
}

/// Assembles the next frame's (num_tracks, d) feature matrix on the tape by
/// gathering one row per source, so training gradients flow into carried
/// hidden states. `prev_feats` must be the matrix all `PrevTrack` rows refer
/// to.
pub fn gather_features_on_tape(
    t: &mut Tape,
    sources: &[FeatureSource],
    det_out: NodeId,
    det_embed: NodeId,
    track_enc: NodeId,
    prev_feats: NodeId,
    d: usize,
) -> Result<NodeId> {
    if sources.is_empty() {
        return Ok(t.constant(Tensor::zeros(0, d)));
    }
    let rows: Vec<NodeId> = sources
        .iter()
        .map(|src| match *src {
            FeatureSource::DecodedDet(i) => t.row_gather(det_out, &[i]),
            FeatureSource::EmbeddedDet(i) => t.row_gather(det_embed, &[i]),
            FeatureSource::EncodedTrack(i) => t.row_gather(track_enc, &[i]),
            FeatureSource::PrevTrack(i) => t.row_gather(prev_feats, &[i]),
        })
        .collect::<Result<_>>()?;
    t.concat_rows(&rows)
}

/// Autoregressive per-sequence tracker. Owns the live track set; every
/// [`Tracker::step`] consumes one frame's detections and returns the tracks
/// emitted for that frame.
pub struct Tracker<'m> {
    model: &'m Model,
    pub cfg: TrackerConfig,
    frame_period: f64,
    tracks: Vec<Track>,
    next_id: u64,
    origin: Option<[f64; 2]>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig, frame_period: f64) -> Result<Self> {
        cfg.validate()?;
        if frame_period <= 0.0 {
            return Err(Error::config("frame period must be positive"));
        }
        Ok(Tracker { model, cfg, frame_period, tracks: Vec::new(), next_id: 0, origin: None })
    }

    /// Live tracks, including coasting ones.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Processes one frame. `labels` carries per-detection ground-truth ids
    /// (aligned with `dets`) and is required by the guided-matching
    /// ablation; otherwise it only refreshes the tracks' identity metadata.
    pub fn step(
        &mut self,
        dets: &[Box3D],
        frame: usize,
        labels: Option<&[Option<u64>]>,
    ) -> Result<Vec<Track>> {
        if let Some(ls) = labels {
            if ls.len() != dets.len() {
                return Err(Error::config(format!(
                    "{} labels for {} detections",
                    ls.len(),
                    dets.len()
                )));
            }
        }
        if self.cfg.gt_identity_guided && labels.is_none() {
            return Err(Error::config("guided matching requires detection labels"));
        }
        for d in dets {
            if d.class_id >= self.model.cfg.num_classes {
                return Err(Error::config(format!(
                    "detection class {} outside the model's {} classes",
                    d.class_id, self.model.cfg.num_classes
                )));
            }
        }

        let kept_idx = nms_indices(dets, self.cfg.nms_iou);
        let kept: Vec<Box3D> = kept_idx.iter().map(|&i| dets[i]).collect();
        let kept_labels: Option<Vec<Option<u64>>> =
            labels.map(|ls| kept_idx.iter().map(|&i| ls[i]).collect());

        if kept.is_empty() {
            // No network pass: tracks age, features carry over untouched.
            let m = MatchResult {
                pairs: Vec::new(),
                unmatched_detections: Vec::new(),
                unmatched_tracks: (0..self.tracks.len()).collect(),
            };
            let up = update_tracks(
                &self.tracks,
                &m,
                &kept,
                None,
                None,
                false,
                frame,
                &self.cfg,
                self.next_id,
            );
            let feats = materialize_features(&up.sources, None, None, None, &self.tracks);
            self.install(up, feats);
            return Ok(self.emitted(frame));
        }

        let origin = *self.origin.get_or_insert_with(|| detection_centroid(&kept));
        let mut tape = Tape::new();
        let mut drop = Dropout::eval();
        let feats = Tensor::from_vec(
            self.tracks.len(),
            self.model.cfg.d,
            self.tracks
                .iter()
                .flat_map(|tr| {
                    debug_assert_eq!(tr.feature.len(), self.model.cfg.d);
                    tr.feature.iter().copied()
                })
                .collect(),
        )?;
        let track_feats = tape.constant(feats);
        let fwd = forward_frame(
            self.model,
            &self.cfg,
            &mut tape,
            &self.tracks,
            track_feats,
            &kept,
            frame,
            self.frame_period,
            origin,
            &mut drop,
        )?;

        let table = affinity_table(&fwd.assoc, &fwd.affinity, &kept);
        let m = if self.cfg.gt_identity_guided {
            guided_match(&self.tracks, &kept, kept_labels.as_deref().unwrap())
        } else if self.cfg.use_hungarian {
            hungarian_match(&table, kept.len(), self.cfg.min_affinity)
        } else {
            greedy_match(&table, self.cfg.min_affinity)
        };

        let velocities = tape.value(fwd.velocities).clone();
        let up = update_tracks(
            &self.tracks,
            &m,
            &kept,
            kept_labels.as_deref(),
            Some(&velocities),
            true,
            frame,
            &self.cfg,
            self.next_id,
        );
        let feats = materialize_features(
            &up.sources,
            Some(tape.value(fwd.det_out)),
            Some(tape.value(fwd.det_embed)),
            Some(tape.value(fwd.track_enc)),
            &self.tracks,
        );
        self.install(up, feats);
        Ok(self.emitted(frame))
    }

    fn install(&mut self, mut up: TrackUpdate, feats: Vec<Vec<f64>>) {
        for (tr, f) in up.tracks.iter_mut().zip(feats) {
            tr.feature = f;
        }
        self.tracks = up.tracks;
        self.next_id = up.next_id;
    }

    fn emitted(&self, frame: usize) -> Vec<Track> {
        self.tracks
            .iter()
            .filter(|tr| self.cfg.emit_inactive || tr.last_update_frame == frame)
            .cloned()
            .collect()
    }
}

/// Folds [`Tracker::step`] over a detection sequence from an empty state.
/// Frame indices are the positions in `frames`.
pub fn run_sequence(
    model: &Model,
    cfg: &TrackerConfig,
    frames: &[Vec<Box3D>],
    frame_period: f64,
) -> Result<Vec<Vec<Track>>> {
    let mut tracker = Tracker::new(model, cfg.clone(), frame_period)?;
    frames
        .iter()
        .enumerate()
        .map(|(f, dets)| tracker.step(dets, f, None))
        .collect()
}
