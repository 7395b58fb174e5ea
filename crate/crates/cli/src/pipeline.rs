//! The five commands behind the `graphmot` binary: simulate, train, track,
//! eval, ablate. Everything here is a thin orchestration layer over the
//! library; file layout and naming live here and nowhere else.
//!
//! Dataset layout under a data directory:
//!
//! ```text
//! data/
//!   config.toml               effective config echo
//!   train/scene_0000.gt.jsonl ground truth, one JSON box per line
//!   train/scene_0000.det.jsonl corrupted detections for the same scene
//!   eval/...
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphmot::autodiff::checkpoint;
use graphmot::baselines::{cv_greedy_track, BaselineConfig};
use graphmot::io as gio;
use graphmot::metrics::{amota_amotp, EvalReport, EvalSequence};
use graphmot::model::Model;
use graphmot::simulator::{corrupt, generate_scene};
use graphmot::tracker::{run_sequence, Track};
use graphmot::training::{fit, EvalPlan, FitOptions, FitReport, Scene};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use crate::config::{Overrides, RunConfig, Split};
use crate::plot::{line_chart, Series};

fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    for split in [Split::Train, Split::Eval] {
        let dir = out.join(split.dir_name());
        fs::create_dir_all(&dir)?;
        let mut boxes = 0usize;
        for i in 0..cfg.scene_count(split) {
            let gt = generate_scene(&cfg.scene_config(split, i))?;
            let dets = corrupt(
                &gt,
                &cfg.noise_config(split, i),
                &cfg.scene.classes,
                cfg.scene.arena,
            )?;
            boxes += gt.total_boxes();
            let name = scene_name(i);
            let classes = cfg.class_names();
            gio::write_ground_truth(
                BufWriter::new(File::create(dir.join(format!("{name}.gt.jsonl")))?),
                &gt,
                &classes,
            )?;
            gio::write_detections(
                BufWriter::new(File::create(dir.join(format!("{name}.det.jsonl")))?),
                &dets,
                &classes,
            )?;
        }
        log::info!(
            "{}: {} scenes, {} ground-truth boxes",
            split.dir_name(),
            cfg.scene_count(split),
            boxes
        );
    }
    cfg.echo(out)?;
    Ok(())
}

/// Load one split of a dataset directory: sorted scene names plus parallel
/// scenes. Ground truth and detections are padded to a common frame count
/// because the line format cannot represent trailing empty frames.
pub fn load_split(cfg: &RunConfig, data: &Path, split: Split) -> Result<(Vec<String>, Vec<Scene>)> {
    let dir = data.join(split.dir_name());
    let classes = cfg.class_names();
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let file = entry?.file_name();
        let file = file.to_string_lossy();
        if let Some(stem) = file.strip_suffix(".det.jsonl") {
            names.push(stem.to_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        bail!("no *.det.jsonl files in {}", dir.display());
    }

    let mut scenes = Vec::with_capacity(names.len());
    for name in &names {
        let det_path = dir.join(format!("{name}.det.jsonl"));
        let gt_path = dir.join(format!("{name}.gt.jsonl"));
        let dets = gio::read_detections(BufReader::new(File::open(&det_path)?), &classes)
            .with_context(|| det_path.display().to_string())?;
        let gt = gio::read_detections(BufReader::new(File::open(&gt_path)?), &classes)
            .with_context(|| gt_path.display().to_string())?
            .into_ground_truth()
            .with_context(|| gt_path.display().to_string())?;
        let (mut gt, mut dets) = (gt, dets.frames);
        let n = gt.frames.len().max(dets.len());
        gt.frames.resize(n, Vec::new());
        dets.resize(n, Vec::new());
        scenes.push(Scene::new(gt, dets)?);
    }
    Ok((names, scenes))
}

/// Train on a loaded dataset; checkpoints and the loss log land in `out`.
fn fit_model(
    cfg: &RunConfig,
    scenes: &[Scene],
    eval_scenes: &[Scene],
    out: &Path,
    extra_meta: serde_json::Value,
) -> Result<(Model, FitReport)> {
    fs::create_dir_all(out)?;
    let mut model = Model::new(cfg.model.clone(), cfg.model_seed())?;
    let mut meta = json!({ "run_config": serde_json::to_value(cfg)? });
    if let Some(obj) = extra_meta.as_object() {
        for (k, v) in obj {
            meta[k] = v.clone();
        }
    }
    let eval = (cfg.train.eval_every > 0 && !eval_scenes.is_empty()).then(|| EvalPlan {
        scenes: eval_scenes,
        every: cfg.train.eval_every,
        cfg: cfg.eval.clone(),
    });
    let log_path = out.join("train_log.csv");
    let ckpt_path = out.join("model.ckpt");
    let opts = FitOptions {
        eval,
        log_path: Some(&log_path),
        checkpoint_path: Some(&ckpt_path),
        checkpoint_meta: Some(meta),
    };
    let report = fit(
        &mut model,
        &cfg.train_config(),
        &cfg.tracker_config(),
        scenes,
        &opts,
    )?;
    Ok((model, report))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<FitReport> {
    let (_, scenes) = load_split(cfg, data, Split::Train)?;
    let eval_scenes = if cfg.train.eval_every > 0 {
        load_split(cfg, data, Split::Eval)?.1
    } else {
        Vec::new()
    };
    log::info!(
        "training on {} scenes ({} eval scenes)",
        scenes.len(),
        eval_scenes.len()
    );
    let (_, report) = fit_model(cfg, &scenes, &eval_scenes, out, json!({}))?;
    if !report.evals.is_empty() {
        let mut w = BufWriter::new(File::create(out.join("eval_points.csv"))?);
        writeln!(w, "epoch,amota,amotp")?;
        for p in &report.evals {
            writeln!(w, "{},{},{}", p.epoch, p.amota, p.amotp)?;
        }
    }
    cfg.echo(out)?;
    if let Some(row) = report.rows.last() {
        log::info!(
            "done: {} clips/epoch, final losses affinity {:.4} velocity {:.4}",
            report.clips,
            row.affinity,
            row.velocity
        );
    }
    Ok(report)
}

/// Rebuild a model from a checkpoint together with the config it was
/// trained under.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ckpt = checkpoint::load(path).with_context(|| path.display().to_string())?;
    let cfg: RunConfig = serde_json::from_value(
        ckpt.meta
            .get("run_config")
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("checkpoint has no run_config metadata"))?,
    )
    .context("checkpoint run_config")?;
    let cfg = cfg.resolved(&Overrides::default())?;
    let mut model = Model::new(cfg.model.clone(), 0)?;
    checkpoint::restore_into(&mut model.store, &ckpt)?;
    Ok((model, cfg))
}

enum TrackMode {
    Learned(Box<Model>),
    Baseline(BaselineConfig),
}

/// Run a tracker over detection files. `detections` may be one
/// `*.det.jsonl` file (then `out` is the output file) or a directory (then
/// `out` is a directory receiving one `<scene>.trk.jsonl` per input).
///
/// With `--baseline` the constant-velocity greedy tracker runs under
/// `cli_cfg` (or the preset). Otherwise the checkpoint is the authority on
/// model and config; a `cli_cfg` given alongside it overrides only the
/// tracker and graph sections, while classes must agree with the
/// checkpoint's.
pub fn cmd_track(
    cli_cfg: Option<RunConfig>,
    ckpt: Option<&Path>,
    detections: &Path,
    out: &Path,
    baseline: bool,
) -> Result<()> {
    let (mode, cfg) = if baseline {
        let cfg = cli_cfg
            .unwrap_or_default()
            .resolved(&Overrides::default())?;
        let b = BaselineConfig {
            graph: cfg.graph.clone().expect("resolved"),
            max_age: cfg.tracker.max_age,
            score_decay: cfg.tracker.score_decay,
            emit_inactive: cfg.tracker.emit_inactive,
        };
        (TrackMode::Baseline(b), cfg)
    } else {
        let path = ckpt.ok_or_else(|| anyhow::anyhow!("need --checkpoint or --baseline"))?;
        let (model, meta_cfg) = load_model(path)?;
        let cfg = match cli_cfg {
            None => meta_cfg,
            Some(c) => {
                if c.scene.classes.iter().map(|s| &s.name).ne(
                    meta_cfg.scene.classes.iter().map(|s| &s.name),
                ) {
                    bail!("--config classes differ from the checkpoint's");
                }
                let c = c.resolved(&Overrides::default())?;
                RunConfig {
                    tracker: c.tracker,
                    graph: c.graph,
                    eval: c.eval,
                    ..meta_cfg
                }
            }
        };
        (TrackMode::Learned(Box::new(model)), cfg)
    };

    let inputs: Vec<(String, PathBuf, PathBuf)> = if detections.is_dir() {
        fs::create_dir_all(out)?;
        let mut names: Vec<String> = fs::read_dir(detections)?
            .filter_map(|e| {
                e.ok()?
                    .file_name()
                    .to_string_lossy()
                    .strip_suffix(".det.jsonl")
                    .map(str::to_owned)
            })
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no *.det.jsonl files in {}", detections.display());
        }
        names
            .into_iter()
            .map(|n| {
                (
                    n.clone(),
                    detections.join(format!("{n}.det.jsonl")),
                    out.join(format!("{n}.trk.jsonl")),
                )
            })
            .collect()
    } else {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        vec![(
            detections.display().to_string(),
            detections.to_path_buf(),
            out.to_path_buf(),
        )]
    };

    let classes = cfg.class_names();
    let period = cfg.scene.frame_period;
    let outputs: Vec<Result<(usize, Vec<Vec<Track>>)>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (name, det_path, _))| {
            let frames = gio::read_detections(BufReader::new(File::open(det_path)?), &classes)
                .with_context(|| name.clone())?
                .frames;
            let output = match &mode {
                TrackMode::Learned(model) => {
                    run_sequence(model, &cfg.tracker_config(), &frames, period)?
                }
                TrackMode::Baseline(b) => cv_greedy_track(&frames, period, b)?,
            };
            Ok((i, output))
        })
        .collect();

    let mut emitted = 0usize;
    let mut ordered: Vec<(usize, Vec<Vec<Track>>)> =
        outputs.into_iter().collect::<Result<Vec<_>>>()?;
    ordered.sort_by_key(|(i, _)| *i);
    for (i, output) in ordered {
        emitted += output.iter().map(Vec::len).sum::<usize>();
        let w = BufWriter::new(File::create(&inputs[i].2)?);
        gio::write_tracks(w, &output, period, &classes)?;
    }
    log::info!("{} sequences, {} track boxes", inputs.len(), emitted);
    Ok(())
}

/// Pair tracking output with ground truth (file with file, or directory
/// with directory by scene name) and write `metrics.json`, per-class curve
/// CSVs and per-metric SVG charts into `out`.
pub fn cmd_eval(cfg: &RunConfig, tracking: &Path, gt: &Path, out: &Path) -> Result<EvalReport> {
    let classes = cfg.class_names();
    let pairs: Vec<(PathBuf, PathBuf)> = if tracking.is_dir() {
        let mut names: Vec<String> = fs::read_dir(tracking)?
            .filter_map(|e| {
                e.ok()?
                    .file_name()
                    .to_string_lossy()
                    .strip_suffix(".trk.jsonl")
                    .map(str::to_owned)
            })
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no *.trk.jsonl files in {}", tracking.display());
        }
        names
            .into_iter()
            .map(|n| {
                let g = gt.join(format!("{n}.gt.jsonl"));
                if !g.is_file() {
                    bail!("{} has no ground truth {}", n, g.display());
                }
                Ok((tracking.join(format!("{n}.trk.jsonl")), g))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(tracking.to_path_buf(), gt.to_path_buf())]
    };

    let mut seqs = Vec::with_capacity(pairs.len());
    for (trk, gtf) in &pairs {
        seqs.push(
            gio::read_eval_sequence(
                BufReader::new(File::open(trk)?),
                BufReader::new(File::open(gtf)?),
                &classes,
            )
            .with_context(|| trk.display().to_string())?,
        );
    }
    let report = amota_amotp(&seqs, &cfg.eval)?;
    write_report(&report, &classes, out)?;
    log::info!("AMOTA {:.4} AMOTP {:.4}", report.amota, report.amotp);
    Ok(report)
}

fn write_report(report: &EvalReport, classes: &[String], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(out.join("metrics.json"), json)?;

    for cr in &report.per_class {
        let name = classes
            .get(cr.class_id)
            .map(String::as_str)
            .unwrap_or("unknown");
        let mut w = BufWriter::new(File::create(out.join(format!("curve_{name}.csv")))?);
        writeln!(
            w,
            "target_recall,threshold,achieved_recall,motar,mota,motp,tp,fp,fn,ids,frag"
        )?;
        for p in &cr.curve {
            let thr = p.threshold.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                p.target_recall,
                thr,
                p.achieved_recall,
                p.motar,
                p.mota,
                p.motp,
                p.tp,
                p.fp,
                p.fn_,
                p.ids,
                p.frag
            )?;
        }
    }

    for (metric, pick) in [
        ("motar", (|p| p.motar) as fn(&graphmot::metrics::CurvePoint) -> f64),
        ("mota", |p| p.mota),
        ("motp", |p| p.motp),
    ] {
        let series: Vec<Series> = report
            .per_class
            .iter()
            .map(|cr| Series {
                label: classes
                    .get(cr.class_id)
                    .cloned()
                    .unwrap_or_else(|| format!("class {}", cr.class_id)),
                points: cr
                    .curve
                    .iter()
                    .filter(|p| p.threshold.is_some())
                    .map(|p| (p.target_recall, pick(p)))
                    .collect(),
            })
            .collect();
        let svg = line_chart(
            &format!("{metric} vs target recall"),
            "target recall",
            metric,
            &series,
        );
        fs::write(out.join(format!("curve_{metric}.svg")), svg)?;
    }
    Ok(())
}

/// Condensed view of a report for ablation rows: class-mean AMOTA/AMOTP and
/// best-operating-point MOTA (classes that never reach a recall target
/// count as 0), with identity switches and fragmentations summed.
pub struct EvalSummary {
    pub amota: f64,
    pub amotp: f64,
    pub mota: f64,
    pub ids: usize,
    pub frag: usize,
}

pub fn summarize(report: &EvalReport) -> EvalSummary {
    let mut mota = 0.0;
    let mut ids = 0;
    let mut frag = 0;
    for cr in &report.per_class {
        if let Some(best) = &cr.best {
            mota += best.mota;
            ids += best.ids;
            frag += best.frag;
        }
    }
    let n = report.per_class.len().max(1);
    EvalSummary {
        amota: report.amota,
        amotp: report.amotp,
        mota: mota / n as f64,
        ids,
        frag,
    }
}

pub fn evaluate_model(cfg: &RunConfig, model: &Model, eval_scenes: &[Scene]) -> Result<EvalReport> {
    let outputs: Vec<Result<Vec<Vec<Track>>>> = eval_scenes
        .par_iter()
        .map(|s| {
            Ok(run_sequence(
                model,
                &cfg.tracker_config(),
                &s.dets,
                s.gt.frame_period,
            )?)
        })
        .collect();
    let mut seqs = Vec::with_capacity(eval_scenes.len());
    for (out, scene) in outputs.into_iter().zip(eval_scenes) {
        seqs.push(EvalSequence::from_output(&out?, &scene.gt));
    }
    Ok(amota_amotp(&seqs, &cfg.eval)?)
}

pub fn evaluate_baseline(cfg: &RunConfig, eval_scenes: &[Scene]) -> Result<EvalReport> {
    let b = BaselineConfig {
        graph: cfg.graph.clone().expect("resolved"),
        max_age: cfg.tracker.max_age,
        score_decay: cfg.tracker.score_decay,
        emit_inactive: cfg.tracker.emit_inactive,
    };
    let mut seqs = Vec::with_capacity(eval_scenes.len());
    for scene in eval_scenes {
        let out = cv_greedy_track(&scene.dets, scene.gt.frame_period, &b)?;
        seqs.push(EvalSequence::from_output(&out, &scene.gt));
    }
    Ok(amota_amotp(&seqs, &cfg.eval)?)
}

/// Ablation grid file.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Training/eval seeds per variant; empty means the base config's seed.
    pub seeds: Vec<u64>,
    /// Also report the constant-velocity greedy baseline as a row.
    pub include_baseline: bool,
    pub variants: Vec<VariantSpec>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            seeds: Vec::new(),
            include_baseline: false,
            variants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: Overrides,
}

/// Train and evaluate every (variant, seed) cell of a grid on a fixed
/// dataset, sequentially, writing `ablation.csv` plus one artifact
/// directory per cell.
pub fn cmd_ablate(base: &RunConfig, grid_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(grid_path)
        .with_context(|| format!("reading grid {}", grid_path.display()))?;
    let grid: GridSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", grid_path.display()))?;
    if grid.variants.is_empty() && !grid.include_baseline {
        bail!("grid has no variants");
    }
    let seeds = if grid.seeds.is_empty() {
        vec![base.seed]
    } else {
        grid.seeds.clone()
    };

    let base_resolved = base.clone().resolved(&Overrides::default())?;
    let (_, train_scenes) = load_split(&base_resolved, data, Split::Train)?;
    let (_, eval_scenes) = load_split(&base_resolved, data, Split::Eval)?;

    fs::create_dir_all(out)?;
    let mut csv = BufWriter::new(File::create(out.join("ablation.csv"))?);
    writeln!(csv, "variant,seed,amota,amotp,mota,ids,frag")?;

    if grid.include_baseline {
        let report = evaluate_baseline(&base_resolved, &eval_scenes)?;
        let s = summarize(&report);
        writeln!(
            csv,
            "cv_greedy,{},{},{},{},{},{}",
            base.seed, s.amota, s.amotp, s.mota, s.ids, s.frag
        )?;
        csv.flush()?;
        log::info!("cv_greedy: AMOTA {:.4}", s.amota);
    }

    for variant in &grid.variants {
        for &seed in &seeds {
            let ov = Overrides {
                seed: Some(seed),
                ..variant.overrides.clone()
            };
            let cfg = base.clone().resolved(&ov)?;
            let cell = out.join(format!("{}_s{}", variant.name, seed));
            let (model, _) = fit_model(
                &cfg,
                &train_scenes,
                &[],
                &cell,
                json!({ "variant": variant.name }),
            )?;
            let report = evaluate_model(&cfg, &model, &eval_scenes)?;
            let s = summarize(&report);
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                variant.name, seed, s.amota, s.amotp, s.mota, s.ids, s.frag
            )?;
            csv.flush()?;
            log::info!("{} seed {}: AMOTA {:.4}", variant.name, seed, s.amota);
        }
    }
    base_resolved.echo(out)?;
    Ok(())
}
