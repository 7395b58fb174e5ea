//! CLEAR-MOT and recall-averaged tracking evaluation.
//!
//! Matching is persistent ground-plane center distance: pairs from the
//! previous frame are kept while still within range, the rest are matched
//! greedily by ascending distance. AMOTA averages recall-normalized MOTA
//! over a fixed grid of recall targets, picking each target's score
//! threshold from the full-recall true-positive score curve.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::simulator::GroundTruthScene;
use crate::tracker::Track;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ground-plane center distance (meters) under which a prediction may
    /// match a ground-truth box.
    pub match_distance: f64,
    /// Number of recall grid points, counting the degenerate r=0 point that
    /// is never evaluated; targets are k/(recall_samples-1) for k >= 1.
    pub recall_samples: usize,
    /// Class ids to evaluate; empty means every class present in the ground
    /// truth.
    pub classes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { match_distance: 2.0, recall_samples: 40, classes: Vec::new() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.match_distance <= 0.0 {
            return Err(Error::config("match_distance must be positive"));
        }
        if self.recall_samples < 2 {
            return Err(Error::config("recall_samples must be at least 2"));
        }
        Ok(())
    }
}

/// One emitted track instance in one frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PredPoint {
    pub frame: usize,
    pub id: u64,
    pub xy: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

/// One ground-truth box instance in one frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GtPoint {
    pub frame: usize,
    pub gt_id: u64,
    pub xy: [f64; 2],
    pub class_id: usize,
}

/// Tracking output and ground truth for one sequence, flat over frames.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSequence {
    pub num_frames: usize,
    pub preds: Vec<PredPoint>,
    pub gts: Vec<GtPoint>,
}

impl EvalSequence {
    pub fn from_output(output: &[Vec<Track>], scene: &GroundTruthScene) -> Self {
        let preds = output
            .iter()
            .enumerate()
            .flat_map(|(f, tracks)| {
                tracks.iter().map(move |t| PredPoint {
                    frame: f,
                    id: t.id,
                    xy: [t.bbox.center[0], t.bbox.center[1]],
                    class_id: t.class_id,
                    score: t.score,
                })
            })
            .collect();
        let gts = scene
            .frames
            .iter()
            .enumerate()
            .flat_map(|(f, boxes)| {
                boxes.iter().map(move |g| GtPoint {
                    frame: f,
                    gt_id: g.gt_id,
                    xy: [g.bbox.center[0], g.bbox.center[1]],
                    class_id: g.bbox.class_id,
                })
            })
            .collect();
        EvalSequence { num_frames: output.len().max(scene.frames.len()), preds, gts }
    }
}

/// Per-frame correspondence bookkeeping for one (sequence, class) stream.
#[derive(Debug, Default)]
pub struct MatchState {
    /// gt -> pred pairs matched in the immediately previous frame.
    prev_pairs: HashMap<u64, u64>,
    /// Last pred id each gt was ever matched to.
    last_id: HashMap<u64, u64>,
    /// Whether the gt was matched at its most recent present frame.
    last_status: HashMap<u64, bool>,
}

/// Counts and correspondence from matching one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameMatch {
    /// (gt_id, pred_id, center distance) per matched pair.
    pub pairs: Vec<(u64, u64, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    pub dist_sum: f64,
}

fn dist2d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Matches one frame's predictions to its ground truth, carrying the
/// previous frame's correspondence where it still holds. Identity switches
/// count a gt matching a different pred id than its last-ever match;
/// fragmentations count a gt resuming tracked status after losing it.
pub fn match_frame(
    state: &mut MatchState,
    preds: &[(u64, [f64; 2])],
    gts: &[(u64, [f64; 2])],
    match_distance: f64,
) -> FrameMatch {
    let mut out = FrameMatch::default();
    let pred_pos: HashMap<u64, [f64; 2]> = preds.iter().copied().collect();
    debug_assert_eq!(pred_pos.len(), preds.len(), "duplicate pred ids in a frame");

    let mut gt_taken: HashSet<u64> = HashSet::new();
    let mut pred_taken: HashSet<u64> = HashSet::new();

    // Sticky pairs from the previous frame, in sorted order for determinism.
    let mut carried: Vec<(u64, u64)> =
        state.prev_pairs.iter().map(|(&g, &p)| (g, p)).collect();
    carried.sort_unstable();
    for (g, p) in carried {
        let Some(&gxy) = gts.iter().find(|&&(id, _)| id == g).map(|(_, xy)| xy) else {
            continue;
        };
        let Some(&pxy) = pred_pos.get(&p) else { continue };
        let d = dist2d(gxy, pxy);
        if d <= match_distance {
            gt_taken.insert(g);
            pred_taken.insert(p);
            out.pairs.push((g, p, d));
        }
    }

    // Remaining candidates greedily by ascending distance.
    let mut cands: Vec<(f64, u64, u64)> = Vec::new();
    for &(g, gxy) in gts {
        if gt_taken.contains(&g) {
            continue;
        }
        for &(p, pxy) in preds {
            if pred_taken.contains(&p) {
                continue;
            }
            let d = dist2d(gxy, pxy);
            if d <= match_distance {
                cands.push((d, g, p));
            }
        }
    }
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (d, g, p) in cands {
        if gt_taken.contains(&g) || pred_taken.contains(&p) {
            continue;
        }
        gt_taken.insert(g);
        pred_taken.insert(p);
        out.pairs.push((g, p, d));
    }

    out.pairs.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    out.tp = out.pairs.len();
    out.fp = preds.len() - out.tp;
    out.fn_ = gts.len() - out.tp;
    out.dist_sum = out.pairs.iter().map(|&(_, _, d)| d).sum();

    state.prev_pairs.clear();
    for &(g, p, _) in &out.pairs {
        if state.last_id.get(&g).is_some_and(|&prev| prev != p) {
            out.ids += 1;
        }
        if state.last_status.get(&g) == Some(&false) {
            out.frag += 1;
        }
        state.last_id.insert(g, p);
        state.last_status.insert(g, true);
        state.prev_pairs.insert(g, p);
    }
    for &(g, _) in gts {
        if !gt_taken.contains(&g) {
            state.last_status.insert(g, false);
        }
    }
    out
}

/// Aggregated counts for one class at one score threshold, pooled across
/// sequences with per-sequence correspondence state.
#[derive(Debug, Clone, Default)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    pub dist_sum: f64,
    /// Score of the matched prediction, one entry per true positive.
    pub tp_scores: Vec<f64>,
    /// (matched frames, present frames) per ground-truth trajectory.
    pub per_gt: Vec<(usize, usize)>,
    /// (tp, fp, fn) per processed frame, for bookkeeping checks.
    pub frames: Vec<(usize, usize, usize)>,
}

impl ClassCounts {
    pub fn recall(&self, gt_total: usize) -> f64 {
        if gt_total == 0 {
            0.0
        } else {
            self.tp as f64 / gt_total as f64
        }
    }
}

/// Runs the persistent matcher over every sequence for one class, keeping
/// only predictions with score >= threshold.
pub fn evaluate_class(
    seqs: &[EvalSequence],
    class_id: usize,
    threshold: f64,
    match_distance: f64,
) -> ClassCounts {
    let mut out = ClassCounts::default();
    for seq in seqs {
        let mut preds_by_frame: Vec<Vec<(u64, [f64; 2], f64)>> = vec![Vec::new(); seq.num_frames];
        for p in &seq.preds {
            if p.class_id == class_id && p.score >= threshold {
                preds_by_frame[p.frame].push((p.id, p.xy, p.score));
            }
        }
        let mut gts_by_frame: Vec<Vec<(u64, [f64; 2])>> = vec![Vec::new(); seq.num_frames];
        for g in &seq.gts {
            if g.class_id == class_id {
                gts_by_frame[g.frame].push((g.gt_id, g.xy));
            }
        }

        let mut state = MatchState::default();
        let mut gt_stats: HashMap<u64, (usize, usize)> = HashMap::new();
        for f in 0..seq.num_frames {
            let preds: Vec<(u64, [f64; 2])> =
                preds_by_frame[f].iter().map(|&(id, xy, _)| (id, xy)).collect();
            let score_of: HashMap<u64, f64> =
                preds_by_frame[f].iter().map(|&(id, _, s)| (id, s)).collect();
            let fm = match_frame(&mut state, &preds, &gts_by_frame[f], match_distance);

            out.tp += fm.tp;
            out.fp += fm.fp;
            out.fn_ += fm.fn_;
            out.ids += fm.ids;
            out.frag += fm.frag;
            out.dist_sum += fm.dist_sum;
            out.frames.push((fm.tp, fm.fp, fm.fn_));
            for &(_, p, _) in &fm.pairs {
                out.tp_scores.push(score_of[&p]);
            }
            let matched: HashSet<u64> = fm.pairs.iter().map(|&(g, _, _)| g).collect();
            for &(g, _) in &gts_by_frame[f] {
                let e = gt_stats.entry(g).or_insert((0, 0));
                e.1 += 1;
                if matched.contains(&g) {
                    e.0 += 1;
                }
            }
        }
        let mut stats: Vec<_> = gt_stats.into_iter().collect();
        stats.sort_unstable_by_key(|&(g, _)| g);
        out.per_gt.extend(stats.into_iter().map(|(_, s)| s));
    }
    out
}

/// MOTA = 1 - (FP + FN + IDS) / gt_total. Unbounded below.
pub fn mota(fp: usize, fn_: usize, ids: usize, gt_total: usize) -> f64 {
    debug_assert!(gt_total > 0);
    1.0 - (fp + fn_ + ids) as f64 / gt_total as f64
}

/// Recall-normalized MOTA at one operating point: the expected misses at
/// recall r are forgiven, the rest is normalized by the r*P matchable
/// budget, floored at zero. `r` is the achieved recall tp/p.
pub fn motar(fp: usize, fn_: usize, ids: usize, tp: usize, p: usize) -> f64 {
    debug_assert!(tp > 0 && p > 0);
    let (pf, r) = (p as f64, tp as f64 / p as f64);
    let num = (ids + fp + fn_) as f64 - (1.0 - r) * pf;
    (1.0 - num / (r * pf)).max(0.0)
}

/// One recall target's operating point in a class sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub target_recall: f64,
    /// None when the tracker cannot reach the target at any threshold.
    pub threshold: Option<f64>,
    pub achieved_recall: f64,
    pub motar: f64,
    pub mota: f64,
    pub motp: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
}

/// Secondary CLEAR metrics at the class's best-MOTA operating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondaryMetrics {
    pub threshold: f64,
    pub recall: f64,
    pub mota: f64,
    pub motp: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    /// Trajectories matched for at least 80% of their life.
    pub mostly_tracked: usize,
    /// Trajectories matched for at most 20% of their life.
    pub mostly_lost: usize,
    pub gt_trajectories: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub gt_total: usize,
    pub amota: f64,
    pub amotp: f64,
    pub curve: Vec<CurvePoint>,
    /// Absent when no recall target was achievable.
    pub best: Option<SecondaryMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_class: Vec<ClassReport>,
    /// Unweighted means over evaluated classes.
    pub amota: f64,
    pub amotp: f64,
}

fn secondary_at(counts: &ClassCounts, threshold: f64, gt_total: usize) -> SecondaryMetrics {
    let (mut mt, mut ml) = (0, 0);
    for &(matched, life) in &counts.per_gt {
        let ratio = matched as f64 / life as f64;
        if ratio >= 0.8 {
            mt += 1;
        }
        if ratio <= 0.2 {
            ml += 1;
        }
    }
    SecondaryMetrics {
        threshold,
        recall: counts.recall(gt_total),
        mota: mota(counts.fp, counts.fn_, counts.ids, gt_total),
        motp: if counts.tp > 0 { counts.dist_sum / counts.tp as f64 } else { 0.0 },
        tp: counts.tp,
        fp: counts.fp,
        fn_: counts.fn_,
        ids: counts.ids,
        frag: counts.frag,
        mostly_tracked: mt,
        mostly_lost: ml,
        gt_trajectories: counts.per_gt.len(),
    }
}

/// Full evaluation: per-class recall sweep with AMOTA/AMOTP and secondary
/// metrics at the best-MOTA threshold, plus unweighted class means. Classes
/// absent from the ground truth are skipped.
pub fn amota_amotp(seqs: &[EvalSequence], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut classes = if cfg.classes.is_empty() {
        let mut set: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.gts.iter().map(|g| g.class_id))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort_unstable();
        set
    } else {
        cfg.classes.clone()
    };
    classes.dedup();

    let mut per_class = Vec::new();
    for class_id in classes {
        let gt_total: usize = seqs
            .iter()
            .map(|s| s.gts.iter().filter(|g| g.class_id == class_id).count())
            .sum();
        if gt_total == 0 {
            continue;
        }

        // Thresholds come off the TP score curve of a sweep with every
        // prediction kept: the k-th best matched score is the loosest
        // threshold that can still deliver k true positives.
        let full = evaluate_class(seqs, class_id, f64::NEG_INFINITY, cfg.match_distance);
        let mut tp_scores = full.tp_scores.clone();
        tp_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let n = cfg.recall_samples;
        let mut curve = Vec::with_capacity(n - 1);
        let mut motar_sum = 0.0;
        let mut amotp_sum = 0.0;
        let mut achieved = 0usize;
        let mut best: Option<(f64, SecondaryMetrics)> = None;
        for k in 1..n {
            let target = k as f64 / (n - 1) as f64;
            // ceil(k * gt_total / (n - 1)) true positives needed, in exact
            // integer arithmetic
            let need = (k * gt_total).div_ceil(n - 1);
            let point = if need > tp_scores.len() {
                CurvePoint {
                    target_recall: target,
                    threshold: None,
                    achieved_recall: 0.0,
                    motar: 0.0,
                    mota: 0.0,
                    motp: 0.0,
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    ids: 0,
                    frag: 0,
                }
            } else {
                let threshold = tp_scores[need - 1];
                let c = evaluate_class(seqs, class_id, threshold, cfg.match_distance);
                if c.tp == 0 {
                    CurvePoint {
                        target_recall: target,
                        threshold: Some(threshold),
                        achieved_recall: 0.0,
                        motar: 0.0,
                        mota: mota(c.fp, c.fn_, c.ids, gt_total),
                        motp: 0.0,
                        tp: 0,
                        fp: c.fp,
                        fn_: c.fn_,
                        ids: c.ids,
                        frag: c.frag,
                    }
                } else {
                    let m = motar(c.fp, c.fn_, c.ids, c.tp, gt_total);
                    let motp = c.dist_sum / c.tp as f64;
                    motar_sum += m;
                    amotp_sum += motp;
                    achieved += 1;
                    let sec = secondary_at(&c, threshold, gt_total);
                    let point_mota = sec.mota;
                    if best.as_ref().is_none_or(|(bm, _)| sec.mota > *bm) {
                        best = Some((sec.mota, sec));
                    }
                    CurvePoint {
                        target_recall: target,
                        threshold: Some(threshold),
                        achieved_recall: c.recall(gt_total),
                        motar: m,
                        mota: point_mota,
                        motp,
                        tp: c.tp,
                        fp: c.fp,
                        fn_: c.fn_,
                        ids: c.ids,
                        frag: c.frag,
                    }
                }
            };
            curve.push(point);
        }

        per_class.push(ClassReport {
            class_id,
            gt_total,
            amota: motar_sum / (n - 1) as f64,
            amotp: if achieved > 0 { amotp_sum / achieved as f64 } else { 0.0 },
            curve,
            best: best.map(|(_, s)| s),
        });
    }

    let k = per_class.len().max(1) as f64;
    Ok(EvalReport {
        config: cfg.clone(),
        amota: per_class.iter().map(|c| c.amota).sum::<f64>() / k,
        amotp: per_class.iter().map(|c| c.amotp).sum::<f64>() / k,
        per_class,
    })
}
