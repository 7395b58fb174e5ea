//! Synthetic scene generation and detection corruption.
//!
//! Scenes are populations of boxes moving with constant-velocity or
//! constant-turn-rate kinematics inside a rectangular arena, reflecting off
//! the walls, spawning and despawning over time. Corruption drops boxes,
//! jitters the survivors, and injects false positives, producing the noisy
//! detection streams the tracker and trainer consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_yaw, Box3D};
use crate::{Error, Result};

/// One object category: geometry statistics, speed cap, concurrent-count
/// bounds and its motion mix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Mean extent (w, l, h) in meters.
    pub size_mean: [f64; 3],
    /// Per-component size standard deviation.
    pub size_std: f64,
    pub max_speed: f64,
    /// Inclusive (min, max) concurrent objects of this class.
    pub count_range: (usize, usize),
    /// Probability a spawned object follows a constant-turn-rate model
    /// instead of constant velocity.
    pub ctrv_prob: f64,
    /// Turn-rate interval in rad/s for constant-turn-rate objects.
    pub turn_rate_range: (f64, f64),
}

/// Explicitly placed object, mainly for tests and demos that need exact
/// kinematics instead of sampled ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedObject {
    pub class_id: usize,
    pub center: [f64; 2],
    pub yaw: f64,
    pub speed: f64,
    /// None: constant velocity. Some(w): constant turn rate w rad/s.
    pub turn_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_frames: usize,
    /// Seconds between frames.
    pub frame_period: f64,
    /// (x_min, x_max, y_min, y_max) in meters.
    pub arena: [f64; 4],
    pub classes: Vec<ClassSpec>,
    /// Per class per frame probability of one spawn (while under the class
    /// count maximum).
    pub spawn_prob: f64,
    /// Per object per frame probability of despawn (while over the class
    /// count minimum).
    pub despawn_prob: f64,
    #[serde(default)]
    pub seed_objects: Vec<SeedObject>,
    pub rng_seed: u64,
}

/// Maps position-jitter magnitude to a detection score:
/// clamp(1 - coeff * |jitter| + eps, 0, 1) with eps ~ N(0, noise).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub coeff: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub pos_sigma: f64,
    pub size_sigma: f64,
    pub yaw_sigma: f64,
    pub vel_sigma: f64,
    pub miss_prob: f64,
    /// Mean false positives per frame (Poisson).
    pub fp_rate: f64,
    pub score_model: ScoreModel,
    pub rng_seed: u64,
}

/// A ground-truth box with its persistent identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GtBox {
    pub gt_id: u64,
    pub bbox: Box3D,
}

/// Ground-truth trajectories, one box list per frame. A gt_id appears at
/// most once per frame and its frames are contiguous.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub frame_period: f64,
    pub frames: Vec<Vec<GtBox>>,
}

impl GroundTruthScene {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::config(format!("num_frames {} < 2", self.num_frames)));
        }
        if !(self.frame_period > 0.0) {
            return Err(Error::config(format!("frame_period {} <= 0", self.frame_period)));
        }
        let [x0, x1, y0, y1] = self.arena;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::config(format!("degenerate arena {:?}", self.arena)));
        }
        if self.classes.is_empty() {
            return Err(Error::config("no classes configured"));
        }
        for p in [self.spawn_prob, self.despawn_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("probability {p} outside [0, 1]")));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.max_speed > 0.0) {
                return Err(Error::config(format!("class {i} max_speed {} <= 0", c.max_speed)));
            }
            if c.size_mean.iter().any(|&s| s <= 0.0) || c.size_std < 0.0 {
                return Err(Error::config(format!("class {i} has invalid size statistics")));
            }
            if c.count_range.0 > c.count_range.1 {
                return Err(Error::config(format!("class {i} count_range inverted")));
            }
            if !(0.0..=1.0).contains(&c.ctrv_prob) {
                return Err(Error::config(format!("class {i} ctrv_prob outside [0, 1]")));
            }
            if c.turn_rate_range.0 > c.turn_rate_range.1 {
                return Err(Error::config(format!("class {i} turn_rate_range inverted")));
            }
        }
        for (i, s) in self.seed_objects.iter().enumerate() {
            if s.class_id >= self.classes.len() {
                return Err(Error::config(format!("seed object {i} names unknown class")));
            }
        }
        Ok(())
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pos_sigma", self.pos_sigma),
            ("size_sigma", self.size_sigma),
            ("yaw_sigma", self.yaw_sigma),
            ("vel_sigma", self.vel_sigma),
            ("fp_rate", self.fp_rate),
            ("score noise", self.score_model.noise),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("{name} {v} < 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(Error::config(format!("miss_prob {} outside [0, 1]", self.miss_prob)));
        }
        Ok(())
    }
}

struct ObjState {
    gt_id: u64,
    class_id: usize,
    size: [f64; 3],
    x: f64,
    y: f64,
    yaw: f64,
    speed: f64,
    /// None: constant velocity. Some(w): constant turn rate.
    omega: Option<f64>,
}

impl ObjState {
    fn velocity(&self) -> [f64; 2] {
        [self.speed * self.yaw.cos(), self.speed * self.yaw.sin()]
    }

    fn to_box(&self, frame: usize, period: f64) -> Box3D {
        Box3D::new(
            [self.x, self.y, self.size[2] / 2.0],
            self.size,
            self.yaw,
            self.velocity(),
            self.class_id,
            1.0,
            frame,
            frame as f64 * period,
        )
    }

    /// Advance one frame period, then reflect off arena walls.
    fn step(&mut self, dt: f64, arena: [f64; 4]) {
        match self.omega {
            Some(w) if w.abs() > 1e-9 => {
                let y0 = self.yaw;
                let y1 = y0 + w * dt;
                self.x += self.speed / w * (y1.sin() - y0.sin());
                self.y += self.speed / w * (y0.cos() - y1.cos());
                self.yaw = normalize_yaw(y1);
            }
            _ => {
                self.x += self.speed * self.yaw.cos() * dt;
                self.y += self.speed * self.yaw.sin() * dt;
            }
        }
        let [x0, x1, y0, y1] = arena;
        for _ in 0..4 {
            if self.x < x0 {
                self.x = 2.0 * x0 - self.x;
                self.yaw = normalize_yaw(std::f64::consts::PI - self.yaw);
            } else if self.x > x1 {
                self.x = 2.0 * x1 - self.x;
                self.yaw = normalize_yaw(std::f64::consts::PI - self.yaw);
            } else if self.y < y0 {
                self.y = 2.0 * y0 - self.y;
                self.yaw = normalize_yaw(-self.yaw);
            } else if self.y > y1 {
                self.y = 2.0 * y1 - self.y;
                self.yaw = normalize_yaw(-self.yaw);
            } else {
                break;
            }
        }
    }
}

fn sample_size(spec: &ClassSpec, rng: &mut ChaCha12Rng) -> [f64; 3] {
    let normal = Normal::new(0.0, spec.size_std.max(1e-12)).unwrap();
    let mut size = [0.0; 3];
    for (s, &mean) in size.iter_mut().zip(spec.size_mean.iter()) {
        *s = (mean + normal.sample(rng)).max(0.3 * mean);
    }
    size
}

fn spawn_object(
    gt_id: u64,
    class_id: usize,
    cfg: &SceneConfig,
    rng: &mut ChaCha12Rng,
) -> ObjState {
    let spec = &cfg.classes[class_id];
    let [x0, x1, y0, y1] = cfg.arena;
    let margin = 1.0f64.min((x1 - x0) / 10.0).min((y1 - y0) / 10.0);
    let x = rng.gen_range(x0 + margin..x1 - margin);
    let y = rng.gen_range(y0 + margin..y1 - margin);
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.gen_range(0.0..spec.max_speed);
    let omega = if rng.gen_range(0.0..1.0) < spec.ctrv_prob {
        Some(rng.gen_range(spec.turn_rate_range.0..=spec.turn_rate_range.1))
    } else {
        None
    };
    let size = sample_size(spec, rng);
    ObjState { gt_id, class_id, size, x, y, yaw, speed, omega }
}

/// Generate ground-truth trajectories. Deterministic in `cfg.rng_seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruthScene> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    let mut next_id: u64 = 0;
    let mut objects: Vec<ObjState> = Vec::new();

    for seed in &cfg.seed_objects {
        let spec = &cfg.classes[seed.class_id];
        let size = sample_size(spec, &mut rng);
        objects.push(ObjState {
            gt_id: next_id,
            class_id: seed.class_id,
            size,
            x: seed.center[0],
            y: seed.center[1],
            yaw: normalize_yaw(seed.yaw),
            speed: seed.speed,
            omega: seed.turn_rate,
        });
        next_id += 1;
    }
    for class_id in 0..cfg.classes.len() {
        let already = objects.iter().filter(|o| o.class_id == class_id).count();
        let (lo, hi) = cfg.classes[class_id].count_range;
        let target = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        for _ in already..target.max(already) {
            objects.push(spawn_object(next_id, class_id, cfg, &mut rng));
            next_id += 1;
        }
    }

    let mut frames = Vec::with_capacity(cfg.num_frames);
    for frame in 0..cfg.num_frames {
        frames.push(
            objects.iter().map(|o| GtBox { gt_id: o.gt_id, bbox: o.to_box(frame, cfg.frame_period) }).collect(),
        );
        if frame + 1 == cfg.num_frames {
            break;
        }

        // Despawn pass: honor per-class minimum counts.
        let mut class_counts = vec![0usize; cfg.classes.len()];
        for o in &objects {
            class_counts[o.class_id] += 1;
        }
        let mut survivors = Vec::with_capacity(objects.len());
        for o in objects {
            let min = cfg.classes[o.class_id].count_range.0;
            if class_counts[o.class_id] > min && rng.gen_range(0.0..1.0) < cfg.despawn_prob {
                class_counts[o.class_id] -= 1;
            } else {
                survivors.push(o);
            }
        }
        objects = survivors;

        for o in &mut objects {
            o.step(cfg.frame_period, cfg.arena);
        }

        // Spawn pass: honor per-class maximum counts.
        for class_id in 0..cfg.classes.len() {
            let max = cfg.classes[class_id].count_range.1;
            if class_counts[class_id] < max && rng.gen_range(0.0..1.0) < cfg.spawn_prob {
                objects.push(spawn_object(next_id, class_id, cfg, &mut rng));
                next_id += 1;
            }
        }
    }
    Ok(GroundTruthScene { frame_period: cfg.frame_period, frames })
}

/// Corrupt ground truth into detections: drop, jitter, score, and add false
/// positives. Class specs are needed to size the false positives.
pub fn corrupt(
    scene: &GroundTruthScene,
    noise: &NoiseConfig,
    classes: &[ClassSpec],
    arena: [f64; 4],
) -> Result<Vec<Vec<Box3D>>> {
    noise.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(noise.rng_seed);
    let pos = Normal::new(0.0, noise.pos_sigma.max(1e-300)).unwrap();
    let size_n = Normal::new(0.0, noise.size_sigma.max(1e-300)).unwrap();
    let yaw_n = Normal::new(0.0, noise.yaw_sigma.max(1e-300)).unwrap();
    let vel_n = Normal::new(0.0, noise.vel_sigma.max(1e-300)).unwrap();
    let eps_n = Normal::new(0.0, noise.score_model.noise.max(1e-300)).unwrap();

    let mut out = Vec::with_capacity(scene.frames.len());
    for (frame_idx, frame) in scene.frames.iter().enumerate() {
        let mut dets: Vec<Box3D> = Vec::with_capacity(frame.len());
        for gt in frame {
            if rng.gen_range(0.0..1.0) < noise.miss_prob {
                continue;
            }
            let b = &gt.bbox;
            let (dx, dy, dz) = (pos.sample(&mut rng), pos.sample(&mut rng), 0.5 * pos.sample(&mut rng));
            let mut size = b.size;
            for s in &mut size {
                *s = (*s + size_n.sample(&mut rng)).max(0.1);
            }
            let yaw = normalize_yaw(b.yaw + yaw_n.sample(&mut rng));
            let vel = [b.velocity[0] + vel_n.sample(&mut rng), b.velocity[1] + vel_n.sample(&mut rng)];
            let eps = eps_n.sample(&mut rng);
            let score =
                (1.0 - noise.score_model.coeff * (dx * dx + dy * dy).sqrt() + eps).clamp(0.0, 1.0);
            dets.push(Box3D::new(
                [b.center[0] + dx, b.center[1] + dy, b.center[2] + dz],
                size,
                yaw,
                vel,
                b.class_id,
                score,
                b.frame,
                b.timestamp,
            ));
        }

        if noise.fp_rate > 0.0 && !classes.is_empty() {
            let count = Poisson::new(noise.fp_rate).unwrap().sample(&mut rng) as usize;
            let [x0, x1, y0, y1] = arena;
            let timestamp = frame_idx as f64 * scene.frame_period;
            for _ in 0..count {
                let class_id = rng.gen_range(0..classes.len());
                let spec = &classes[class_id];
                let size = sample_size(spec, &mut rng);
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let speed = rng.gen_range(0.0..spec.max_speed / 2.0);
                dets.push(Box3D::new(
                    [rng.gen_range(x0..x1), rng.gen_range(y0..y1), size[2] / 2.0],
                    size,
                    yaw,
                    [speed * yaw.cos(), speed * yaw.sin()],
                    class_id,
                    rng.gen_range(0.05..0.4),
                    frame_idx,
                    timestamp,
                ));
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// The three benchmark classes: a car-like, a pedestrian-like and a
/// truck-like category. Concurrent counts span 10 to 30 objects total.
pub fn benchmark_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            size_mean: [1.9, 4.6, 1.7],
            size_std: 0.15,
            max_speed: 11.0,
            count_range: (5, 14),
            ctrv_prob: 0.55,
            turn_rate_range: (-0.5, 0.5),
        },
        ClassSpec {
            name: "pedestrian".into(),
            size_mean: [0.7, 0.7, 1.8],
            size_std: 0.08,
            max_speed: 2.0,
            count_range: (3, 9),
            ctrv_prob: 0.45,
            turn_rate_range: (-0.9, 0.9),
        },
        ClassSpec {
            name: "truck".into(),
            size_mean: [2.6, 8.0, 3.2],
            size_std: 0.3,
            max_speed: 8.0,
            count_range: (2, 7),
            ctrv_prob: 0.5,
            turn_rate_range: (-0.35, 0.35),
        },
    ]
}

pub const BENCHMARK_ARENA: [f64; 4] = [-35.0, 35.0, -35.0, 35.0];

/// Benchmark scene preset: 20 frames at 2 Hz in a 70 m square arena.
impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_frames: 20,
            frame_period: 0.5,
            arena: BENCHMARK_ARENA,
            classes: benchmark_classes(),
            spawn_prob: 0.1,
            despawn_prob: 0.015,
            seed_objects: Vec::new(),
            rng_seed: 0,
        }
    }
}

pub fn benchmark_scene_config(rng_seed: u64) -> SceneConfig {
    SceneConfig {
        rng_seed,
        ..SceneConfig::default()
    }
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel { coeff: 0.6, noise: 0.05 }
    }
}

/// Benchmark noise preset: 0.3 m position jitter, 10% misses, 2 false
/// positives per frame, detector velocities corrupted hard enough that
/// constant-velocity extrapolation from them is unreliable.
impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pos_sigma: 0.3,
            size_sigma: 0.1,
            yaw_sigma: 0.1,
            vel_sigma: 2.5,
            miss_prob: 0.1,
            fp_rate: 2.0,
            score_model: ScoreModel::default(),
            rng_seed: 0,
        }
    }
}

pub fn benchmark_noise_config(rng_seed: u64) -> NoiseConfig {
    NoiseConfig {
        rng_seed,
        ..NoiseConfig::default()
    }
}
