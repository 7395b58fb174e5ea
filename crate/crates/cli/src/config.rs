//! Run configuration: one TOML file covering simulation, model, tracker,
//! training and evaluation, resolved against the benchmark preset.
//!
//! Every section and field may be omitted; omitted values take the preset
//! defaults. Unknown keys anywhere are a hard error so typos cannot
//! silently fall back to defaults. The `rng_seed` fields inside `[scene]`
//! and `[noise]` are templates: per-scene seeds are derived from the global
//! `seed`, which is also what `GRAPHMOT_SEED` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use graphmot::graph::GraphBuildConfig;
use graphmot::metrics::EvalConfig;
use graphmot::model::ModelConfig;
use graphmot::simulator::{NoiseConfig, SceneConfig};
use graphmot::tracker::TrackerConfig;
use graphmot::training::{splitmix64, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every random stream (scenes, noise, init, training) is
    /// derived from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    /// Omitted: radii derived from the class table, frame period and max
    /// track age.
    pub graph: Option<GraphBuildConfig>,
    pub model: ModelConfig,
    pub tracker: TrackerSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
            graph: None,
            model: ModelConfig::default(),
            tracker: TrackerSection::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_scenes: 200,
            eval_scenes: 50,
        }
    }
}

/// Tracker options as they appear in the file; the gating radii live in
/// `[graph]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub max_age: usize,
    pub min_affinity: f64,
    pub score_decay: f64,
    pub nms_iou: f64,
    pub emit_inactive: bool,
    pub use_hungarian: bool,
    pub gt_identity_guided: bool,
    pub no_hidden_state: bool,
    pub zero_edge_features: bool,
    pub no_velocity_head: bool,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let t = TrackerConfig::default();
        TrackerSection {
            max_age: t.max_age,
            min_affinity: t.min_affinity,
            score_decay: t.score_decay,
            nms_iou: t.nms_iou,
            emit_inactive: t.emit_inactive,
            use_hungarian: t.use_hungarian,
            gt_identity_guided: t.gt_identity_guided,
            no_hidden_state: t.no_hidden_state,
            zero_edge_features: t.zero_edge_features,
            no_velocity_head: t.no_velocity_head,
        }
    }
}

/// Training options; the optimizer seed is the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub clip_len: usize,
    pub clip_stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_v: f64,
    pub smooth_l1_beta: f64,
    pub label_min_iou: f64,
    /// Evaluate on the eval split after every this many epochs; 0 disables
    /// periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            clip_len: t.clip_len,
            clip_stride: t.clip_stride,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            focal_alpha: t.focal_alpha,
            focal_gamma: t.focal_gamma,
            lambda_v: t.lambda_v,
            smooth_l1_beta: t.smooth_l1_beta,
            label_min_iou: t.label_min_iou,
            eval_every: 0,
        }
    }
}

/// Ablation knobs, settable as `train` flags or per `ablate` grid variant.
/// None leaves the config value in force.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub clip_len: Option<usize>,
    pub max_age: Option<usize>,
    pub hungarian: Option<bool>,
    pub gt_guided: Option<bool>,
    pub no_hidden_state: Option<bool>,
    pub zero_edge_features: Option<bool>,
    pub fully_connected: Option<bool>,
    pub radius_mult: Option<f64>,
    pub lambda_v: Option<f64>,
    /// Decoder layers.
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub seed: Option<u64>,
}

/// Disjoint derived-seed streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// `GRAPHMOT_SEED` beats the config file.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("GRAPHMOT_SEED") {
            self.seed = v
                .parse()
                .with_context(|| format!("GRAPHMOT_SEED {v:?} is not an integer"))?;
        }
        Ok(())
    }

    /// Applies ablation overrides, fills the derived `[graph]` section and
    /// validates cross-section invariants. Every command works on a
    /// resolved config.
    pub fn resolved(mut self, ov: &Overrides) -> Result<Self> {
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.clip_len {
            self.train.clip_len = v;
        }
        if let Some(v) = ov.max_age {
            self.tracker.max_age = v;
        }
        if let Some(v) = ov.hungarian {
            self.tracker.use_hungarian = v;
        }
        if let Some(v) = ov.gt_guided {
            self.tracker.gt_identity_guided = v;
        }
        if let Some(v) = ov.no_hidden_state {
            self.tracker.no_hidden_state = v;
        }
        if let Some(v) = ov.zero_edge_features {
            self.tracker.zero_edge_features = v;
        }
        if let Some(v) = ov.lambda_v {
            self.train.lambda_v = v;
        }
        if let Some(v) = ov.layers {
            self.model.decoder_layers = v;
        }
        if let Some(v) = ov.dim {
            self.model.d = v;
        }
        if let Some(v) = ov.heads {
            self.model.heads = v;
        }

        let mut graph = self.graph.take().unwrap_or_else(|| {
            GraphBuildConfig::from_classes(
                &self.scene.classes,
                self.scene.frame_period,
                self.tracker.max_age,
            )
        });
        if let Some(m) = ov.radius_mult {
            graph.radius_multiplier = m;
        }
        if let Some(f) = ov.fully_connected {
            graph.fully_connected_assoc = f;
        }
        self.graph = Some(graph);

        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        let graph = self.graph.as_ref().expect("resolved");
        graph.validate()?;
        if graph.class_radii.len() != self.scene.classes.len() {
            bail!(
                "{} classes but {} gating radii",
                self.scene.classes.len(),
                graph.class_radii.len()
            );
        }
        if self.model.num_classes != self.scene.classes.len() {
            bail!(
                "model.num_classes {} but {} scene classes",
                self.model.num_classes,
                self.scene.classes.len()
            );
        }
        self.tracker_config().validate()?;
        self.train_config().validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Effective-config echo written into output directories.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self).context("serializing effective config")?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }

    fn stream(&self, tag: u64, i: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(tag ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn scene_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.dataset.train_scenes,
            Split::Eval => self.dataset.eval_scenes,
        }
    }

    pub fn scene_config(&self, split: Split, i: usize) -> SceneConfig {
        let tag = match split {
            Split::Train => 1,
            Split::Eval => 3,
        };
        SceneConfig {
            rng_seed: self.stream(tag, i as u64),
            ..self.scene.clone()
        }
    }

    pub fn noise_config(&self, split: Split, i: usize) -> NoiseConfig {
        let tag = match split {
            Split::Train => 2,
            Split::Eval => 4,
        };
        NoiseConfig {
            rng_seed: self.stream(tag, i as u64),
            ..self.noise.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.stream(5, 0)
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        let t = &self.tracker;
        TrackerConfig {
            max_age: t.max_age,
            min_affinity: t.min_affinity,
            score_decay: t.score_decay,
            nms_iou: t.nms_iou,
            emit_inactive: t.emit_inactive,
            use_hungarian: t.use_hungarian,
            gt_identity_guided: t.gt_identity_guided,
            no_hidden_state: t.no_hidden_state,
            zero_edge_features: t.zero_edge_features,
            no_velocity_head: t.no_velocity_head,
            graph: self
                .graph
                .clone()
                .expect("resolved config has a graph section"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            clip_len: t.clip_len,
            clip_stride: t.clip_stride,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            focal_alpha: t.focal_alpha,
            focal_gamma: t.focal_gamma,
            lambda_v: t.lambda_v,
            smooth_l1_beta: t.smooth_l1_beta,
            label_min_iou: t.label_min_iou,
            seed: self.seed,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.scene.classes.iter().map(|c| c.name.clone()).collect()
    }
}
