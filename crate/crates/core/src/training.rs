//! Fully online training: the tracker runs forward over a short clip with
//! every frame's losses recorded on one tape, and a single backward pass
//! propagates through the hidden states carried across frames.
//!
//! Hard matching decisions and box bookkeeping are treated as
//! non-differentiable: gradients flow only through the feature tensors. The
//! discrete skeleton of a clip (matches plus the velocity values used for
//! box prediction) can be frozen and replayed, which is what makes central
//! finite differences a valid oracle for the BPTT gradients.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, AdamW, GradMap, NodeId, Tape, Tensor};
use crate::geometry::{nms_indices, Box3D};
use crate::graph::{detection_centroid, SparseGraph};
use crate::matching::{assign_labels, greedy_match, MatchResult};
use crate::metrics::{amota_amotp, EvalConfig, EvalSequence};
use crate::model::{Dropout, Model};
use crate::simulator::GroundTruthScene;
use crate::tracker::{
    affinity_table, forward_frame, gather_features_on_tape, guided_match, hungarian_match,
    run_sequence, update_tracks, Track, TrackerConfig,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clip length in frames; the first frame only seeds tracks.
    pub clip_len: usize,
    /// Frames between consecutive clip windows cut from a scene.
    pub clip_stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the velocity loss in the per-frame sum.
    pub lambda_v: f64,
    pub smooth_l1_beta: f64,
    /// Minimum IoU for a detection to inherit a ground-truth identity.
    pub label_min_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_len: 6,
            clip_stride: 1,
            batch_size: 8,
            epochs: 12,
            lr: 0.001,
            weight_decay: 0.01,
            focal_alpha: 0.5,
            focal_gamma: 1.0,
            lambda_v: 1.0,
            smooth_l1_beta: 1.0,
            label_min_iou: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 {
            return Err(Error::config("clip_len must be at least 2"));
        }
        if self.clip_stride == 0 {
            return Err(Error::config("clip_stride must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lambda_v < 0.0 {
            return Err(Error::config("lambda_v must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.focal_alpha) || self.focal_alpha == 0.0 {
            return Err(Error::config(format!(
                "focal_alpha {} outside (0, 1)",
                self.focal_alpha
            )));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::config("focal_gamma must be nonnegative"));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_min_iou) || self.label_min_iou == 0.0 {
            return Err(Error::config("label_min_iou must be in (0, 1)"));
        }
        Ok(())
    }
}

/// One sequence of detections with its ground truth, the unit of clip
/// sampling.
#[derive(Debug, Clone)]
pub struct Scene {
    pub gt: GroundTruthScene,
    pub dets: Vec<Vec<Box3D>>,
}

impl Scene {
    pub fn new(gt: GroundTruthScene, dets: Vec<Vec<Box3D>>) -> Result<Self> {
        if gt.frames.len() != dets.len() {
            return Err(Error::config(format!(
                "{} ground-truth frames but {} detection frames",
                gt.frames.len(),
                dets.len()
            )));
        }
        Ok(Scene { gt, dets })
    }

    pub fn num_frames(&self) -> usize {
        self.dets.len()
    }
}

/// Focal loss over edge logits: FL = -alpha_t (1-p_t)^gamma log p_t,
/// averaged over edges, built from signed logits so large magnitudes stay
/// finite. Targets must be exactly 0 or 1.
pub fn focal_loss(
    t: &mut Tape,
    logits: NodeId,
    targets: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<NodeId> {
    let shape = {
        let v = t.value(logits);
        (v.rows, v.cols)
    };
    if shape.1 != 1 || shape.0 != targets.len() || targets.is_empty() {
        return Err(Error::shape(
            "focal_loss",
            format!("logits {}x{} with {} targets", shape.0, shape.1, targets.len()),
        ));
    }
    debug_assert!(targets.iter().all(|&y| y == 0.0 || y == 1.0));

    let n = targets.len();
    let sign =
        t.constant(Tensor::from_vec(n, 1, targets.iter().map(|&y| 2.0 * y - 1.0).collect())?);
    let alpha_t = t.constant(Tensor::from_vec(
        n,
        1,
        targets.iter().map(|&y| if y == 1.0 { alpha } else { 1.0 - alpha }).collect(),
    )?);
    let s = t.mul(logits, sign)?;
    let log_pt = t.log_sigmoid(s)?;
    let neg_s = t.neg(s)?;
    let one_minus_pt = t.sigmoid(neg_s)?;
    let focal_w = t.powf(one_minus_pt, gamma)?;
    let weighted = t.mul(alpha_t, focal_w)?;
    let per_edge = t.mul(weighted, log_pt)?;
    let mean = t.mean_all(per_edge)?;
    t.neg(mean)
}

/// Smooth-L1 velocity loss over the supervised rows of the prediction,
/// averaged over supervised components. `targets[i]` pairs with row
/// `sup_idx[i]`. An empty mask yields a constant zero.
pub fn velocity_loss(
    t: &mut Tape,
    pred: NodeId,
    sup_idx: &[usize],
    targets: &[[f64; 2]],
    beta: f64,
) -> Result<NodeId> {
    if sup_idx.len() != targets.len() {
        return Err(Error::shape(
            "velocity_loss",
            format!("{} indices vs {} targets", sup_idx.len(), targets.len()),
        ));
    }
    if sup_idx.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let sup = t.row_gather(pred, sup_idx)?;
    let tgt = t.constant(Tensor::from_vec(
        targets.len(),
        2,
        targets.iter().flatten().copied().collect(),
    )?);
    let err = t.sub(sup, tgt)?;
    let pen = t.huber(err, beta)?;
    t.mean_all(pen)
}

/// Edge classification targets: positive iff the track's identity and the
/// detection's label are the same ground-truth object. Either side missing
/// an identity makes the edge negative.
pub fn edge_targets(tracks: &[Track], labels: &[Option<u64>], assoc: &SparseGraph) -> Vec<f64> {
    assoc
        .edges
        .iter()
        .map(|&(tj, di)| match (tracks[tj].gt_id, labels[di]) {
            (Some(a), Some(b)) if a == b => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Losses recorded for one supervised frame of a clip.
#[derive(Debug, Clone, Default)]
pub struct FrameLossRecord {
    pub affinity: f64,
    pub velocity: f64,
    pub positive_edges: usize,
    pub negative_edges: usize,
    pub supervised: usize,
}

/// The discrete decisions of one frame, replayable so that a later run of
/// the same clip keeps an identical graph skeleton while parameters move.
#[derive(Debug, Clone)]
pub struct FramePlan {
    pub m: MatchResult,
    /// Velocity head values adopted into track metadata this frame.
    pub velocities: Tensor,
}

#[derive(Debug)]
pub struct ClipResult {
    /// Sum of per-frame losses, the quantity differentiated.
    pub seq_loss: f64,
    /// Unweighted affinity term, summed over supervised frames.
    pub affinity_loss: f64,
    /// Unweighted velocity term, summed over supervised frames.
    pub velocity_loss: f64,
    pub frames: Vec<FrameLossRecord>,
    pub plan: Vec<FramePlan>,
    /// None when the clip had nothing to supervise.
    pub grads: Option<GradMap>,
}

impl ClipResult {
    pub fn skipped(&self) -> bool {
        self.grads.is_none()
    }
}

/// Runs one clip autoregressively with gradients recorded, computing losses
/// from frame 2 onward, and backpropagates their sum through every frame.
/// `frozen` replays a previous run's matches and velocity metadata instead
/// of deciding them from the current forward values.
pub fn train_clip(
    model: &Model,
    cfg: &TrainConfig,
    trk: &TrackerConfig,
    scene: &Scene,
    start: usize,
    drop: &mut Dropout,
    frozen: Option<&[FramePlan]>,
) -> Result<ClipResult> {
    run_clip(model, cfg, trk, scene, start, drop, frozen, true)
}

/// [`train_clip`] without the backward pass, returning only the summed
/// loss. Finite-difference probing calls the forward thousands of times;
/// skipping gradient work roughly halves that cost.
pub fn clip_loss(
    model: &Model,
    cfg: &TrainConfig,
    trk: &TrackerConfig,
    scene: &Scene,
    start: usize,
    drop: &mut Dropout,
    frozen: Option<&[FramePlan]>,
) -> Result<f64> {
    run_clip(model, cfg, trk, scene, start, drop, frozen, false).map(|r| r.seq_loss)
}

#[allow(clippy::too_many_arguments)]
fn run_clip(
    model: &Model,
    cfg: &TrainConfig,
    trk: &TrackerConfig,
    scene: &Scene,
    start: usize,
    drop: &mut Dropout,
    frozen: Option<&[FramePlan]>,
    with_grads: bool,
) -> Result<ClipResult> {
    cfg.validate()?;
    trk.validate()?;
    let t_len = cfg.clip_len;
    if start + t_len > scene.num_frames() {
        return Err(Error::config(format!(
            "clip [{start}, {}) outside scene of {} frames",
            start + t_len,
            scene.num_frames()
        )));
    }
    if let Some(p) = frozen {
        if p.len() != t_len {
            return Err(Error::config(format!(
                "frozen plan has {} frames, clip needs {t_len}",
                p.len()
            )));
        }
    }

    let d = model.cfg.d;
    let mut tape = Tape::new();
    let mut tracks: Vec<Track> = Vec::new();
    let mut feats = tape.constant(Tensor::zeros(0, d));
    let mut next_id = 0u64;
    let mut origin: Option<[f64; 2]> = None;

    let mut loss_nodes: Vec<NodeId> = Vec::new();
    let mut records = Vec::with_capacity(t_len - 1);
    let mut plans = Vec::with_capacity(t_len);
    let (mut aff_sum, mut vel_sum) = (0.0, 0.0);

    for ti in 0..t_len {
        let frame = start + ti;
        let kept_idx = nms_indices(&scene.dets[frame], trk.nms_iou);
        let kept: Vec<Box3D> = kept_idx.iter().map(|&i| scene.dets[frame][i]).collect();
        let gts: Vec<(u64, Box3D)> =
            scene.gt.frames[frame].iter().map(|g| (g.gt_id, g.bbox)).collect();
        let labels = assign_labels(&kept, &gts, cfg.label_min_iou);

        if kept.is_empty() {
            let plan = match frozen {
                Some(p) => p[ti].clone(),
                None => FramePlan {
                    m: MatchResult {
                        pairs: Vec::new(),
                        unmatched_detections: Vec::new(),
                        unmatched_tracks: (0..tracks.len()).collect(),
                    },
                    velocities: Tensor::zeros(0, 2),
                },
            };
            let up = update_tracks(
                &tracks, &plan.m, &kept, None, None, false, frame, trk, next_id,
            );
            feats = gather_features_on_tape(&mut tape, &up.sources, feats, feats, feats, feats, d)?;
            tracks = up.tracks;
            next_id = up.next_id;
            plans.push(plan);
            if ti > 0 {
                records.push(FrameLossRecord::default());
            }
            continue;
        }

        let org = *origin.get_or_insert_with(|| detection_centroid(&kept));
        let fwd = forward_frame(
            model,
            trk,
            &mut tape,
            &tracks,
            feats,
            &kept,
            frame,
            scene.gt.frame_period,
            org,
            drop,
        )?;

        if ti > 0 {
            let targets = edge_targets(&tracks, &labels, &fwd.assoc);
            let mut rec = FrameLossRecord {
                positive_edges: targets.iter().filter(|&&y| y == 1.0).count(),
                negative_edges: targets.iter().filter(|&&y| y == 0.0).count(),
                ..FrameLossRecord::default()
            };
            let mut frame_loss: Option<NodeId> = None;
            if !targets.is_empty() {
                let aff =
                    focal_loss(&mut tape, fwd.affinity_logits, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
                rec.affinity = tape.value(aff).item();
                frame_loss = Some(aff);
            }
            let gt_vel: HashMap<u64, [f64; 2]> =
                gts.iter().map(|&(id, b)| (id, b.velocity)).collect();
            let mut sup_idx = Vec::new();
            let mut vel_targets = Vec::new();
            for (di, l) in labels.iter().enumerate() {
                if let Some(g) = l {
                    sup_idx.push(di);
                    vel_targets.push(gt_vel[g]);
                }
            }
            if !sup_idx.is_empty() {
                rec.supervised = sup_idx.len();
                let vel = velocity_loss(
                    &mut tape,
                    fwd.velocities,
                    &sup_idx,
                    &vel_targets,
                    cfg.smooth_l1_beta,
                )?;
                rec.velocity = tape.value(vel).item();
                let scaled = tape.mul_scalar(vel, cfg.lambda_v)?;
                frame_loss = Some(match frame_loss {
                    Some(a) => tape.add(a, scaled)?,
                    None => scaled,
                });
            }
            debug_assert!(
                rec.affinity.is_finite()
                    && rec.affinity >= 0.0
                    && rec.velocity.is_finite()
                    && rec.velocity >= 0.0
            );
            aff_sum += rec.affinity;
            vel_sum += rec.velocity;
            records.push(rec);
            if let Some(node) = frame_loss {
                loss_nodes.push(node);
            }
        }

        let plan = match frozen {
            Some(p) => p[ti].clone(),
            None => {
                let m = if trk.gt_identity_guided {
                    guided_match(&tracks, &kept, &labels)
                } else {
                    let table = affinity_table(&fwd.assoc, &fwd.affinity, &kept);
                    if trk.use_hungarian {
                        hungarian_match(&table, kept.len(), trk.min_affinity)
                    } else {
                        greedy_match(&table, trk.min_affinity)
                    }
                };
                FramePlan { m, velocities: tape.value(fwd.velocities).clone() }
            }
        };
        let up = update_tracks(
            &tracks,
            &plan.m,
            &kept,
            Some(&labels),
            Some(&plan.velocities),
            true,
            frame,
            trk,
            next_id,
        );
        feats = gather_features_on_tape(
            &mut tape,
            &up.sources,
            fwd.det_out,
            fwd.det_embed,
            fwd.track_enc,
            feats,
            d,
        )?;
        tracks = up.tracks;
        next_id = up.next_id;
        plans.push(plan);
    }

    if loss_nodes.is_empty() {
        log::warn!("clip at frame {start} had no supervisable edges or velocities; skipping");
        return Ok(ClipResult {
            seq_loss: 0.0,
            affinity_loss: 0.0,
            velocity_loss: 0.0,
            frames: records,
            plan: plans,
            grads: None,
        });
    }

    let mut seq = loss_nodes[0];
    for &node in &loss_nodes[1..] {
        seq = tape.add(seq, node)?;
    }
    let seq_loss = tape.value(seq).item();
    let grads = if with_grads {
        let mut g = GradMap::new(&model.store);
        tape.backward(seq, &mut g)?;
        Some(g)
    } else {
        None
    };

    Ok(ClipResult {
        seq_loss,
        affinity_loss: aff_sum,
        velocity_loss: vel_sum,
        frames: records,
        plan: plans,
        grads,
    })
}

/// One optimizer-step row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub seq_loss: f64,
    pub affinity: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub amota: f64,
    pub amotp: f64,
}

#[derive(Debug, Default)]
pub struct FitReport {
    pub rows: Vec<LogRow>,
    pub evals: Vec<EvalPoint>,
    pub clips: usize,
}

pub struct EvalPlan<'a> {
    pub scenes: &'a [Scene],
    /// Evaluate after every this many epochs (and after the last).
    pub every: usize,
    pub cfg: EvalConfig,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub eval: Option<EvalPlan<'a>>,
    /// CSV destination for the loss log.
    pub log_path: Option<&'a Path>,
    /// Checkpoint written after every epoch.
    pub checkpoint_path: Option<&'a Path>,
    /// Extra fields merged into each checkpoint's metadata; "epoch" and
    /// "seed" are always set.
    pub checkpoint_meta: Option<serde_json::Value>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn clip_dropout_key(seed: u64, epoch: usize, clip: usize) -> u64 {
    splitmix64(seed ^ splitmix64((epoch as u64) << 32 | clip as u64))
}

/// All stride-1 clip windows of every scene long enough to hold one.
pub fn clip_windows(scenes: &[Scene], clip_len: usize, stride: usize) -> Vec<(usize, usize)> {
    debug_assert!(stride >= 1);
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if scene.num_frames() < clip_len {
            log::warn!("scene {si} shorter than a clip ({} frames), skipped", scene.num_frames());
            continue;
        }
        for start in (0..=scene.num_frames() - clip_len).step_by(stride) {
            out.push((si, start));
        }
    }
    out
}

/// Trains from scratch: epochs of shuffled clips, gradients summed per
/// batch, one AdamW step per batch.
pub fn fit(
    model: &mut Model,
    cfg: &TrainConfig,
    trk: &TrackerConfig,
    scenes: &[Scene],
    opts: &FitOptions,
) -> Result<FitReport> {
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    fit_with(model, cfg, trk, scenes, opts, &mut opt, 0)
}

/// [`fit`] with caller-owned optimizer state and a starting epoch, the
/// resume path after loading a checkpoint.
pub fn fit_with(
    model: &mut Model,
    cfg: &TrainConfig,
    trk: &TrackerConfig,
    scenes: &[Scene],
    opts: &FitOptions,
    opt: &mut AdamW,
    start_epoch: usize,
) -> Result<FitReport> {
    cfg.validate()?;
    trk.validate()?;
    let clips = clip_windows(scenes, cfg.clip_len, cfg.clip_stride);
    if clips.is_empty() {
        return Err(Error::config("no clip windows: every scene is shorter than clip_len"));
    }

    let mut report = FitReport { clips: clips.len(), ..FitReport::default() };
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64)));
        order.shuffle(&mut rng);

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(usize, Result<ClipResult>)> = chunk
                .par_iter()
                .map(|&ci| {
                    let (si, fstart) = clips[ci];
                    let mut drop =
                        Dropout::train(model.cfg.dropout, clip_dropout_key(cfg.seed, epoch, ci));
                    (ci, train_clip(model, cfg, trk, &scenes[si], fstart, &mut drop, None))
                })
                .collect();

            model.store.zero_grads();
            let (mut bl, mut ba, mut bv, mut used) = (0.0, 0.0, 0.0, 0usize);
            // fixed merge order regardless of worker scheduling
            for (ci, res) in results {
                let res = res?;
                if res.skipped() {
                    continue;
                }
                let (si, fstart) = clips[ci];
                let finite = res.seq_loss.is_finite()
                    && res.grads.as_ref().is_some_and(|g| g.all_finite());
                if !finite {
                    return Err(Error::Diverged(format!(
                        "scene {si} clip at frame {fstart}, epoch {epoch}: loss {}",
                        res.seq_loss
                    )));
                }
                model.store.accumulate(res.grads.as_ref().unwrap());
                bl += res.seq_loss;
                ba += res.affinity_loss;
                bv += res.velocity_loss;
                used += 1;
            }
            opt.step(&mut model.store);

            let denom = used.max(1) as f64;
            report.rows.push(LogRow {
                epoch,
                batch: batch_idx,
                seq_loss: bl / denom,
                affinity: ba / denom,
                velocity: bv / denom,
            });
        }

        if let Some(plan) = &opts.eval {
            let done = epoch + 1;
            if plan.every > 0 && (done % plan.every == 0 || done == cfg.epochs) {
                let mut seqs = Vec::with_capacity(plan.scenes.len());
                for scene in plan.scenes {
                    let out = run_sequence(model, trk, &scene.dets, scene.gt.frame_period)?;
                    seqs.push(EvalSequence::from_output(&out, &scene.gt));
                }
                let rep = amota_amotp(&seqs, &plan.cfg)?;
                report.evals.push(EvalPoint { epoch: done, amota: rep.amota, amotp: rep.amotp });
            }
        }
        if let Some(path) = opts.checkpoint_path {
            let mut meta = opts
                .checkpoint_meta
                .clone()
                .unwrap_or_else(|| serde_json::json!({}));
            meta["epoch"] = serde_json::json!(epoch + 1);
            meta["seed"] = serde_json::json!(cfg.seed);
            checkpoint::save(path, &model.store, Some(opt), meta)?;
        }
    }

    if let Some(path) = opts.log_path {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,batch,seq_loss,affinity,velocity")?;
        for r in &report.rows {
            writeln!(f, "{},{},{},{},{}", r.epoch, r.batch, r.seq_loss, r.affinity, r.velocity)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::{central_diff_grads, max_rel_error};
    use crate::autodiff::ParamStore;
    use crate::model::ModelConfig;
    use crate::simulator::{benchmark_classes, corrupt, generate_scene, NoiseConfig, SceneConfig};
    use rand::Rng;

    fn tiny_model(d: usize, heads: usize) -> Model {
        let cfg = ModelConfig {
            d,
            heads,
            encoder_layers: 1,
            decoder_layers: 2,
            dropout: 0.0,
            ffn_multiplier: 2,
            num_classes: 3,
            ..ModelConfig::default()
        };
        Model::new(cfg, 7).unwrap()
    }

    fn sim_scene(seed: u64, frames: usize, vel_sigma: f64) -> Scene {
        let mut scfg = SceneConfig {
            num_frames: frames,
            rng_seed: seed,
            ..crate::simulator::benchmark_scene_config(seed)
        };
        // keep the toy scenes small enough for finite-difference sweeps
        for c in &mut scfg.classes {
            c.count_range = (1, 2);
        }
        scfg.spawn_prob = 0.0;
        let gt = generate_scene(&scfg).unwrap();
        let noise = NoiseConfig {
            rng_seed: seed ^ 0xABCD,
            vel_sigma,
            ..crate::simulator::benchmark_noise_config(seed)
        };
        let dets = corrupt(&gt, &noise, &benchmark_classes(), scfg.arena).unwrap();
        Scene::new(gt, dets).unwrap()
    }

    fn trk_cfg() -> TrackerConfig {
        TrackerConfig { min_affinity: 0.3, ..TrackerConfig::default() }
    }

    #[test]
    fn focal_loss_at_zero_logit_matches_formula() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::from_vec(1, 1, vec![0.0]).unwrap());
        let loss = focal_loss(&mut t, logits, &[1.0], 0.5, 1.0).unwrap();
        let expect = 0.5 * 0.5 * std::f64::consts::LN_2;
        assert!((t.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_gamma_zero_is_scaled_cross_entropy() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 17;
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let mut t = Tape::new();
        let node = t.constant(Tensor::from_vec(n, 1, logits.clone()).unwrap());
        let loss = focal_loss(&mut t, node, &targets, 0.5, 0.0).unwrap();
        let bce: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        assert!((t.value(loss).item() - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_matches_scalar_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.gen_range(1..30);
            let (alpha, gamma) = (rng.gen_range(0.1..0.9), rng.gen_range(0.0..3.0));
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
            let mut t = Tape::new();
            let node = t.constant(Tensor::from_vec(n, 1, logits.clone()).unwrap());
            let loss = focal_loss(&mut t, node, &targets, alpha, gamma).unwrap();
            let reference: f64 = logits
                .iter()
                .zip(&targets)
                .map(|(&x, &y)| {
                    let p = 1.0 / (1.0 + (-x).exp());
                    let (pt, at) = if y == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
                    -at * (1.0 - pt).powf(gamma) * pt.ln()
                })
                .sum::<f64>()
                / n as f64;
            assert!((t.value(loss).item() - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_loss_is_stable_at_extreme_logits() {
        let mut t = Tape::new();
        let node = t.constant(Tensor::from_vec(2, 1, vec![80.0, -80.0]).unwrap());
        let loss = focal_loss(&mut t, node, &[0.0, 1.0], 0.5, 1.0).unwrap();
        let v = t.value(loss).item();
        assert!(v.is_finite() && v > 0.0, "confidently wrong must stay finite, got {v}");
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = store
            .add("w", Tensor::from_vec(3, 1, (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
            .unwrap();
        let x = Tensor::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let targets = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];

        let run = |store: &ParamStore| -> Result<(f64, GradMap)> {
            let mut t = Tape::new();
            let xw = t.param(store, w);
            let xc = t.constant(x.clone());
            let logits = t.matmul(xc, xw)?;
            let loss = focal_loss(&mut t, logits, &targets, 0.3, 2.0)?;
            let v = t.value(loss).item();
            let mut g = GradMap::new(store);
            t.backward(loss, &mut g)?;
            Ok((v, g))
        };
        let (_, analytic) = run(&store).unwrap();
        let fd = central_diff_grads(&mut store, 1e-5, |s| run(s).map(|(v, _)| v)).unwrap();
        assert!(max_rel_error(&store, &analytic, &fd) < 1e-7);
    }

    #[test]
    fn velocity_loss_examples() {
        let mut t = Tape::new();
        let pred = t.constant(Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let same = velocity_loss(&mut t, pred, &[0, 1], &[[1.0, -2.0], [3.0, 0.5]], 1.0).unwrap();
        assert_eq!(t.value(same).item(), 0.0);

        // every supervised component off by 2: |e| - beta/2 = 1.5
        let off = velocity_loss(&mut t, pred, &[0], &[[3.0, -4.0]], 1.0).unwrap();
        assert!((t.value(off).item() - 1.5).abs() < 1e-12);

        // inside the quadratic region: 0.5 * 0.5^2 / 1
        let close = velocity_loss(&mut t, pred, &[1], &[[3.5, 1.0]], 1.0).unwrap();
        assert!((t.value(close).item() - 0.125).abs() < 1e-12);

        let empty = velocity_loss(&mut t, pred, &[], &[], 1.0).unwrap();
        assert_eq!(t.value(empty).item(), 0.0);
    }

    #[test]
    fn velocity_loss_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let p = store
            .add("p", Tensor::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
            .unwrap();
        let targets = [[0.4, -0.2], [2.5, 2.5], [-1.0, 0.0]];
        let run = |store: &ParamStore| -> Result<(f64, GradMap)> {
            let mut t = Tape::new();
            let node = t.param(store, p);
            let loss = velocity_loss(&mut t, node, &[0, 2, 3], &targets, 1.0)?;
            let v = t.value(loss).item();
            let mut g = GradMap::new(store);
            t.backward(loss, &mut g)?;
            Ok((v, g))
        };
        let (_, analytic) = run(&store).unwrap();
        let fd = central_diff_grads(&mut store, 1e-6, |s| run(s).map(|(v, _)| v)).unwrap();
        assert!(max_rel_error(&store, &analytic, &fd) < 1e-6);
    }

    #[test]
    fn clip_loss_is_sum_of_frame_losses() {
        let model = tiny_model(16, 4);
        let scene = sim_scene(42, 6, 0.4);
        let cfg = TrainConfig { clip_len: 6, ..TrainConfig::default() };
        let mut drop = Dropout::eval();
        let res = train_clip(&model, &cfg, &trk_cfg(), &scene, 0, &mut drop, None).unwrap();
        assert!(!res.skipped());
        let manual: f64 =
            res.frames.iter().map(|f| f.affinity + cfg.lambda_v * f.velocity).sum();
        assert!(
            (res.seq_loss - manual).abs() < 1e-12,
            "seq {} vs frame sum {manual}",
            res.seq_loss
        );
        assert_eq!(res.frames.len(), 5);
        assert_eq!(res.plan.len(), 6);
    }

    #[test]
    fn clip_is_deterministic_for_a_fixed_key() {
        let model = tiny_model(16, 4);
        let scene = sim_scene(43, 6, 0.4);
        let cfg = TrainConfig::default();
        let run = |key: u64| {
            let mut drop = Dropout::train(0.1, key);
            train_clip(&model, &cfg, &trk_cfg(), &scene, 0, &mut drop, None).unwrap()
        };
        let (a, b, c) = (run(9), run(9), run(10));
        assert_eq!(a.seq_loss.to_bits(), b.seq_loss.to_bits());
        for (pid, _) in model.store.iter() {
            match (a.grads.as_ref().unwrap().get(pid), b.grads.as_ref().unwrap().get(pid)) {
                (Some(x), Some(y)) => assert_eq!(x.data, y.data),
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
        assert_ne!(a.seq_loss.to_bits(), c.seq_loss.to_bits(), "different dropout key");
    }

    #[test]
    fn clip_gradients_match_finite_differences() {
        let model = tiny_model(8, 2);
        let scene = sim_scene(44, 3, 0.3);
        let cfg = TrainConfig { clip_len: 3, ..TrainConfig::default() };
        let trk = trk_cfg();

        let mut drop = Dropout::eval();
        let base = train_clip(&model, &cfg, &trk, &scene, 0, &mut drop, None).unwrap();
        assert!(!base.skipped(), "fixture must produce a loss");
        let analytic = base.grads.as_ref().unwrap();

        let mut probe = model.clone();
        let plan = &base.plan;
        let mut store = model.store.clone();
        let fd = central_diff_grads(&mut store, 1e-4, |s| {
            probe.store = s.clone();
            let mut d = Dropout::eval();
            clip_loss(&probe, &cfg, &trk, &scene, 0, &mut d, Some(plan))
        })
        .unwrap();
        // elementwise bound loose enough for finite-difference noise on tiny
        // gradients; the global norm ratio is what catches a wrong backward
        // rule (any real bug lands orders of magnitude above it)
        let err = max_rel_error(&model.store, analytic, &fd);
        assert!(err < 1e-3, "max elementwise relative error {err}");
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for (pid, param) in model.store.iter() {
            let zero = Tensor::zeros(param.value.rows, param.value.cols);
            let a = analytic.get(pid).unwrap_or(&zero);
            let f = &fd[pid.0];
            for (&av, &fv) in a.data.iter().zip(f.data.iter()) {
                diff2 += (av - fv) * (av - fv);
                norm2 += av * av;
            }
        }
        let global = (diff2 / norm2).sqrt();
        assert!(global < 1e-6, "global gradient error {global}");
    }

    #[test]
    fn batch_gradient_is_sum_of_clip_gradients() {
        let model = tiny_model(16, 4);
        let scene = sim_scene(45, 8, 0.4);
        let cfg = TrainConfig::default();
        let trk = trk_cfg();
        let mut d0 = Dropout::eval();
        let mut d1 = Dropout::eval();
        let a = train_clip(&model, &cfg, &trk, &scene, 0, &mut d0, None).unwrap();
        let b = train_clip(&model, &cfg, &trk, &scene, 2, &mut d1, None).unwrap();

        let mut store = model.store.clone();
        store.zero_grads();
        store.accumulate(a.grads.as_ref().unwrap());
        store.accumulate(b.grads.as_ref().unwrap());
        for (pid, param) in store.iter() {
            let zero = Tensor::zeros(param.value.rows, param.value.cols);
            let ga = a.grads.as_ref().unwrap().get(pid).unwrap_or(&zero);
            let gb = b.grads.as_ref().unwrap().get(pid).unwrap_or(&zero);
            for (i, &g) in param.grad.data.iter().enumerate() {
                assert!((g - (ga.data[i] + gb.data[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn guided_and_greedy_share_the_target_rule() {
        // single object: both matchers bind the one detection to the one
        // track, so identical histories must give identical targets/losses
        let model = tiny_model(16, 4);
        let mut scfg = crate::simulator::benchmark_scene_config(77);
        scfg.num_frames = 4;
        for c in &mut scfg.classes {
            c.count_range = (0, 0);
        }
        scfg.classes[0].count_range = (1, 1);
        scfg.spawn_prob = 0.0;
        let gt = generate_scene(&scfg).unwrap();
        let noise = NoiseConfig {
            rng_seed: 5,
            miss_prob: 0.0,
            fp_rate: 0.0,
            ..crate::simulator::benchmark_noise_config(5)
        };
        let dets = corrupt(&gt, &noise, &benchmark_classes(), scfg.arena).unwrap();
        let scene = Scene::new(gt, dets).unwrap();

        let cfg = TrainConfig { clip_len: 4, ..TrainConfig::default() };
        let greedy_cfg = TrackerConfig { min_affinity: 0.01, ..TrackerConfig::default() };
        let guided_cfg = TrackerConfig { gt_identity_guided: true, ..greedy_cfg.clone() };
        let mut d0 = Dropout::eval();
        let mut d1 = Dropout::eval();
        let a = train_clip(&model, &cfg, &greedy_cfg, &scene, 0, &mut d0, None).unwrap();
        let b = train_clip(&model, &cfg, &guided_cfg, &scene, 0, &mut d1, None).unwrap();
        for (ra, rb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(ra.positive_edges, rb.positive_edges);
            assert_eq!(ra.negative_edges, rb.negative_edges);
            assert_eq!(ra.affinity.to_bits(), rb.affinity.to_bits());
        }
        for (pa, pb) in a.plan.iter().zip(&b.plan) {
            assert_eq!(pa.m.pairs, pb.m.pairs);
        }
    }

    #[test]
    fn unsupervisable_clip_is_skipped() {
        let model = tiny_model(16, 4);
        // detections exist but ground truth is empty: no labels, and the
        // two frames' detections are different classes so no edges form
        let mk = |frame: usize, class_id: usize| {
            Box3D::new(
                [0.0, 0.0, 1.0],
                [2.0, 2.0, 2.0],
                0.0,
                [0.0, 0.0],
                class_id,
                0.9,
                frame,
                frame as f64 * 0.5,
            )
        };
        let gt = GroundTruthScene { frame_period: 0.5, frames: vec![Vec::new(), Vec::new()] };
        let scene = Scene::new(gt, vec![vec![mk(0, 0)], vec![mk(1, 1)]]).unwrap();
        let cfg = TrainConfig { clip_len: 2, ..TrainConfig::default() };
        let mut d = Dropout::eval();
        let res = train_clip(&model, &cfg, &trk_cfg(), &scene, 0, &mut d, None).unwrap();
        assert!(res.skipped());
        assert_eq!(res.seq_loss, 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut model = tiny_model(8, 2);
        let before: Vec<Vec<f64>> =
            model.store.iter().map(|(_, p)| p.value.data.clone()).collect();
        let scene = sim_scene(46, 6, 0.4);
        let cfg = TrainConfig {
            clip_len: 6,
            epochs: 1,
            lr: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        fit(&mut model, &cfg, &trk_cfg(), &[scene], &FitOptions::default()).unwrap();
        for ((_, p), orig) in model.store.iter().zip(&before) {
            assert_eq!(&p.value.data, orig);
        }
    }

    #[test]
    fn single_clip_overfits() {
        let mut model = tiny_model(16, 4);
        let scene = sim_scene(47, 6, 0.4);
        let cfg = TrainConfig {
            clip_len: 6,
            epochs: 25,
            lr: 0.003,
            weight_decay: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &cfg, &trk_cfg(), &[scene], &FitOptions::default()).unwrap();
        assert_eq!(report.clips, 1);
        let first = report.rows.first().unwrap().seq_loss;
        let last = report.rows.last().unwrap().seq_loss;
        assert!(
            last < first * 0.8,
            "loss should fall on a single repeated clip: {first} -> {last}"
        );
    }

    #[test]
    fn training_resumes_bit_exact_from_checkpoint() {
        let scenes = vec![sim_scene(48, 7, 0.4), sim_scene(49, 7, 0.4)];
        let trk = trk_cfg();
        let cfg4 = TrainConfig { clip_len: 6, epochs: 4, seed: 2, ..TrainConfig::default() };

        let mut full = tiny_model(8, 2);
        fit(&mut full, &cfg4, &trk, &scenes, &FitOptions::default()).unwrap();

        let dir = std::env::temp_dir().join(format!("graphmot-resume-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt_path = dir.join("resume.ckpt");

        let mut half = tiny_model(8, 2);
        let cfg2 = TrainConfig { epochs: 2, ..cfg4.clone() };
        let mut opt = AdamW::new(&half.store, cfg2.lr, cfg2.weight_decay);
        fit_with(&mut half, &cfg2, &trk, &scenes, &FitOptions::default(), &mut opt, 0).unwrap();
        checkpoint::save(&ckpt_path, &half.store, Some(&opt), serde_json::json!({"epoch": 2}))
            .unwrap();

        let mut resumed = tiny_model(8, 2);
        let ckpt = checkpoint::load(&ckpt_path).unwrap();
        checkpoint::restore_into(&mut resumed.store, &ckpt).unwrap();
        let st = ckpt.optimizer.unwrap();
        let mut opt2 = AdamW::from_state(cfg4.lr, cfg4.weight_decay, st.step, st.m, st.v);
        fit_with(&mut resumed, &cfg4, &trk, &scenes, &FitOptions::default(), &mut opt2, 2)
            .unwrap();

        for ((_, a), (_, b)) in full.store.iter().zip(resumed.store.iter()) {
            assert_eq!(a.value.data, b.value.data, "parameter {} diverged", a.name);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fit_writes_a_csv_log() {
        let mut model = tiny_model(8, 2);
        let scene = sim_scene(50, 6, 0.4);
        let cfg = TrainConfig { clip_len: 6, epochs: 2, ..TrainConfig::default() };
        let dir = std::env::temp_dir().join(format!("graphmot-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let log_path = dir.join("train.csv");
        let opts = FitOptions { log_path: Some(&log_path), ..FitOptions::default() };
        let report = fit(&mut model, &cfg, &trk_cfg(), &[scene], &opts).unwrap();
        let text = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,batch,seq_loss,affinity,velocity");
        assert_eq!(lines.len(), 1 + report.rows.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
