//! JSON-lines interchange for detections and tracking output.
//!
//! One JSON object per line. Detection records carry a class *name* rather
//! than an index so files produced by other toolchains can be ingested; a
//! class table maps names to indices on read. Ground truth uses the same
//! record shape with `gt_id` set. A frame with no objects produces no lines,
//! so readers reconstruct it as empty from the surrounding frame indices.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::Box3D;
use crate::metrics::{EvalSequence, GtPoint, PredPoint};
use crate::simulator::{GroundTruthScene, GtBox};
use crate::tracker::Track;
use crate::{Error, Result};

/// One detection (or ground-truth box) on one line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u64>,
}

/// One emitted track state on one line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub id: u64,
    pub class: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
}

fn class_index(classes: &[String], name: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::Format(format!("unknown class {name:?}")))
}

fn class_name(classes: &[String], id: usize) -> Result<&str> {
    classes
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("class id {id} outside table of {}", classes.len())))
}

impl DetectionRecord {
    pub fn from_box(b: &Box3D, gt_id: Option<u64>, classes: &[String]) -> Result<Self> {
        Ok(Self {
            frame: b.frame,
            timestamp: b.timestamp,
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity,
            class: class_name(classes, b.class_id)?.to_owned(),
            score: b.score,
            gt_id,
        })
    }

    pub fn to_box(&self, classes: &[String]) -> Result<Box3D> {
        if self.size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Format(format!("non-positive size {:?}", self.size)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Format(format!("score {} outside [0, 1]", self.score)));
        }
        let all = self
            .center
            .iter()
            .chain(&self.size)
            .chain(&self.velocity)
            .chain([&self.yaw, &self.timestamp]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite field".into()));
        }
        Ok(Box3D::new(
            self.center,
            self.size,
            self.yaw,
            self.velocity,
            class_index(classes, &self.class)?,
            self.score,
            self.frame,
            self.timestamp,
        ))
    }
}

/// Detections parsed back into per-frame lists, with whatever identities the
/// file carried.
#[derive(Debug, Clone, Default)]
pub struct DetectionLog {
    pub frames: Vec<Vec<Box3D>>,
    /// Parallel to `frames`; None for records without a gt_id field.
    pub gt_ids: Vec<Vec<Option<u64>>>,
}

impl DetectionLog {
    /// Reassemble a ground-truth scene. Every record must carry a gt_id.
    /// The frame period is inferred from the first pair of consecutive
    /// frames that both have boxes, falling back to 0.5 s.
    pub fn into_ground_truth(self) -> Result<GroundTruthScene> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for (f, (boxes, ids)) in self.frames.into_iter().zip(self.gt_ids).enumerate() {
            let mut out = Vec::with_capacity(boxes.len());
            for (b, id) in boxes.into_iter().zip(ids) {
                let gt_id = id.ok_or_else(|| {
                    Error::Format(format!("frame {f}: ground-truth record without gt_id"))
                })?;
                out.push(GtBox { gt_id, bbox: b });
            }
            frames.push(out);
        }
        let mut frame_period = 0.5;
        for w in frames.windows(2) {
            if let (Some(a), Some(b)) = (w[0].first(), w[1].first()) {
                let dt = b.bbox.timestamp - a.bbox.timestamp;
                if dt > 0.0 {
                    frame_period = dt;
                    break;
                }
            }
        }
        Ok(GroundTruthScene {
            frame_period,
            frames,
        })
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Write per-frame detections, one line per box, in frame order.
pub fn write_detections<W: Write>(
    mut w: W,
    frames: &[Vec<Box3D>],
    classes: &[String],
) -> Result<()> {
    for boxes in frames {
        for b in boxes {
            write_line(&mut w, &DetectionRecord::from_box(b, None, classes)?)?;
        }
    }
    Ok(())
}

/// Write ground truth in the detection format with gt_id on every line.
pub fn write_ground_truth<W: Write>(
    mut w: W,
    scene: &GroundTruthScene,
    classes: &[String],
) -> Result<()> {
    for frame in &scene.frames {
        for gt in frame {
            write_line(
                &mut w,
                &DetectionRecord::from_box(&gt.bbox, Some(gt.gt_id), classes)?,
            )?;
        }
    }
    Ok(())
}

/// Parse a detection file. Frames are reconstructed as 0..=max_frame; frames
/// no line mentions come back empty, which means trailing empty frames are
/// not representable in the format. Lines may arrive in any frame order.
pub fn read_detections<R: BufRead>(r: R, classes: &[String]) -> Result<DetectionLog> {
    let mut log = DetectionLog::default();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let b = rec.to_box(classes)?;
        if rec.frame >= log.frames.len() {
            log.frames.resize(rec.frame + 1, Vec::new());
            log.gt_ids.resize(rec.frame + 1, Vec::new());
        }
        log.frames[rec.frame].push(b);
        log.gt_ids[rec.frame].push(rec.gt_id);
    }
    Ok(log)
}

/// Write tracker output, one line per emitted track per frame. Boxes keep
/// the pose of their last matched detection, so a track emitted while
/// coasting reports that stale pose with the current frame's stamp.
pub fn write_tracks<W: Write>(
    mut w: W,
    output: &[Vec<Track>],
    frame_period: f64,
    classes: &[String],
) -> Result<()> {
    for (frame, tracks) in output.iter().enumerate() {
        for tr in tracks {
            let timestamp = if tr.last_update_frame == frame {
                tr.bbox.timestamp
            } else {
                frame as f64 * frame_period
            };
            write_line(
                &mut w,
                &TrackRecord {
                    frame,
                    timestamp,
                    id: tr.id,
                    class: class_name(classes, tr.class_id)?.to_owned(),
                    center: tr.bbox.center,
                    size: tr.bbox.size,
                    yaw: tr.bbox.yaw,
                    velocity: tr.velocity_est,
                    score: tr.score,
                },
            )?;
        }
    }
    Ok(())
}

/// Parse a tracking file into evaluation points plus the frame count it
/// implies (max frame + 1, or 0 for an empty file).
pub fn read_tracking<R: BufRead>(r: R, classes: &[String]) -> Result<(Vec<PredPoint>, usize)> {
    let mut preds = Vec::new();
    let mut num_frames = 0;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        num_frames = num_frames.max(rec.frame + 1);
        preds.push(PredPoint {
            frame: rec.frame,
            id: rec.id,
            xy: [rec.center[0], rec.center[1]],
            class_id: class_index(classes, &rec.class)?,
            score: rec.score,
        });
    }
    Ok((preds, num_frames))
}

/// Pair a tracking file with a ground-truth file for evaluation.
pub fn read_eval_sequence<R1: BufRead, R2: BufRead>(
    tracking: R1,
    ground_truth: R2,
    classes: &[String],
) -> Result<EvalSequence> {
    let (preds, pred_frames) = read_tracking(tracking, classes)?;
    let log = read_detections(ground_truth, classes)?;
    let mut gts = Vec::new();
    for (frame, (boxes, ids)) in log.frames.iter().zip(&log.gt_ids).enumerate() {
        for (b, id) in boxes.iter().zip(ids) {
            let gt_id = id.ok_or_else(|| {
                Error::Format(format!("frame {frame}: ground-truth record without gt_id"))
            })?;
            gts.push(GtPoint {
                frame,
                gt_id,
                xy: [b.center[0], b.center[1]],
                class_id: b.class_id,
            });
        }
    }
    Ok(EvalSequence {
        num_frames: pred_frames.max(log.frames.len()),
        preds,
        gts,
    })
}
