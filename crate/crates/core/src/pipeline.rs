//! Seeded end-to-end loop: random scene → render → (depth augmentation) →
//! encode → oracle → decode with and without fusion → metrics.
//!
//! Every scene draws from its own seed derived from the run seed and the
//! scene index, so scenes can be processed in any order or in parallel and
//! aggregated afterwards with [`aggregate`].

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_full, DecodedPose, FusionConfig, FusionMode};
use crate::encoder::{encode, EncodedMaps, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::depth_rescale;
use crate::loss::{entries_mut, gradient_check, GradCheck, StagePredictions};
use crate::metrics::{EvalReport, Evaluator, MetricConfig};
use crate::synth::{oracle_predict, render_scene, sample_random_scene, OracleNoise, RenderedScene, SceneParams};
use crate::types::{CameraIntrinsics, DepthImage, Detection, Part, Pose, Skeleton};

/// Scene generation settings for the round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundTripParams {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub min_figures: usize,
    pub max_figures: usize,
    /// Probability that a scene forces its figures to overlap.
    pub overlap_prob: f64,
    pub scene: SceneParams,
    /// Depth augmentation scale range; `None` disables it.
    pub aug_range: Option<(f64, f64)>,
}

impl Default for RoundTripParams {
    fn default() -> Self {
        Self {
            scenes: 200,
            width: 224,
            height: 224,
            min_figures: 1,
            max_figures: 3,
            overlap_prob: 0.5,
            scene: SceneParams::default(),
            aug_range: None,
        }
    }
}

/// Everything the loop needs besides the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub camera: CameraIntrinsics,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub metrics: MetricConfig,
    pub noise: OracleNoise,
    pub roundtrip: RoundTripParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            metrics: MetricConfig::default(),
            noise: OracleNoise::default(),
            roundtrip: RoundTripParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.metrics.validate()?;
        self.noise.validate()?;
        self.roundtrip.scene.validate()?;
        let rt = &self.roundtrip;
        if rt.width == 0 || rt.height == 0 {
            return Err(Error::InvalidConfig("round trip: image size must be positive".into()));
        }
        if rt.min_figures > rt.max_figures {
            return Err(Error::InvalidConfig("round trip: min_figures exceeds max_figures".into()));
        }
        if !(0.0..=1.0).contains(&rt.overlap_prob) {
            return Err(Error::InvalidConfig("round trip: overlap_prob must lie in [0, 1]".into()));
        }
        if let Some((lo, hi)) = rt.aug_range {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!("augmentation range {lo}:{hi} is invalid")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finaliser, used to derive independent per-scene seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

impl ModeCounts {
    fn add(&mut self, poses: &[DecodedPose]) {
        for p in poses.iter().flat_map(|d| &d.parts).filter(|p| p.labeled) {
            match p.mode {
                FusionMode::A => self.a += 1,
                FusionMode::B => self.b += 1,
                FusionMode::C => self.c += 1,
            }
        }
    }
}

/// Result of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutcome {
    pub gts: Vec<Pose>,
    pub fused: Vec<Detection>,
    pub global_only: Vec<Detection>,
    pub modes: ModeCounts,
    pub collisions: usize,
}

/// Scene `index` of a round trip seeded with `seed`, as rendered (before
/// depth augmentation).
pub fn synth_scene(cfg: &PipelineConfig, seed: u64, index: usize) -> Result<RenderedScene> {
    let rt = &cfg.roundtrip;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let n = rng.random_range(rt.min_figures..=rt.max_figures);
    let params = SceneParams {
        force_overlap: rng.random_bool(rt.overlap_prob),
        ..rt.scene
    };
    let figures = sample_random_scene(rng.random(), n, &params, &cfg.camera, rt.width, rt.height);
    render_scene(&figures, &Skeleton::itop15(), &cfg.camera, rt.width, rt.height, cfg.encoder.vis_tol)
}

/// Runs scene `index` of a round trip seeded with `seed`.
pub fn run_scene(cfg: &PipelineConfig, seed: u64, index: usize) -> Result<SceneOutcome> {
    let skeleton = Skeleton::itop15();
    let scene = synth_scene(cfg, seed, index)?;
    let (depth, gts) = match cfg.roundtrip.aug_range {
        Some((lo, hi)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
            rng.set_stream(1);
            let a = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            depth_rescale(&scene.depth, &scene.poses, &cfg.camera, a)?
        }
        None => (scene.depth, scene.poses),
    };
    let maps = encode(&gts, skeleton.k, &depth, &cfg.encoder)?;
    let noise = OracleNoise {
        seed: mix_seed(cfg.noise.seed, index as u64),
        ..cfg.noise
    };
    let pred = oracle_predict(&maps, &noise)?;
    let last = pred.final_stage();
    let fused = decode_full(last, &pred.global, &cfg.encoder.anchors, &cfg.fusion)?;
    let forced_a = FusionConfig {
        fusion: false,
        ..cfg.fusion.clone()
    };
    let global_only = decode_full(last, &pred.global, &cfg.encoder.anchors, &forced_a)?;
    let mut modes = ModeCounts::default();
    modes.add(&fused);
    Ok(SceneOutcome {
        gts,
        fused: fused.iter().map(DecodedPose::detection).collect(),
        global_only: global_only.iter().map(DecodedPose::detection).collect(),
        modes,
        collisions: maps.collisions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub seed: u64,
    pub scenes: usize,
    pub fused: EvalReport,
    pub global_only: EvalReport,
    pub modes: ModeCounts,
    /// Ground-truth poses dropped because another pose took their anchor slot.
    pub collisions: usize,
}

impl RoundTripReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "round trip: {} scenes, seed {}", self.scenes, self.seed);
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9} {:>9}", "decoder", "2D PCK", "3D PCK", "2D mAP", "3D mAP");
        for (name, r) in [("fused", &self.fused), ("global", &self.global_only)] {
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name, r.pck_2d.mean, r.pck_3d.mean, r.ap_2d.mean, r.ap_3d.mean
            );
        }
        let _ = writeln!(
            s,
            "modes A {}  B {}  C {}  slot collisions {}",
            self.modes.a, self.modes.b, self.modes.c, self.collisions
        );
        s
    }
}

/// Folds scene outcomes, in index order, into a report.
pub fn aggregate(cfg: &PipelineConfig, seed: u64, outcomes: &[SceneOutcome]) -> Result<RoundTripReport> {
    let skeleton = Skeleton::itop15();
    let mut fused = Evaluator::new(&skeleton, &cfg.camera, &cfg.metrics)?;
    let mut global = Evaluator::new(&skeleton, &cfg.camera, &cfg.metrics)?;
    let mut modes = ModeCounts::default();
    let mut collisions = 0;
    for o in outcomes {
        fused.add_scene(&o.fused, &o.gts)?;
        global.add_scene(&o.global_only, &o.gts)?;
        modes.a += o.modes.a;
        modes.b += o.modes.b;
        modes.c += o.modes.c;
        collisions += o.collisions;
    }
    Ok(RoundTripReport {
        seed,
        scenes: outcomes.len(),
        fused: fused.report(),
        global_only: global.report(),
        modes,
        collisions,
    })
}

/// Single-threaded round trip over `cfg.roundtrip.scenes` scenes.
pub fn run_roundtrip(cfg: &PipelineConfig, seed: u64) -> Result<RoundTripReport> {
    cfg.validate()?;
    let outcomes = (0..cfg.roundtrip.scenes)
        .map(|i| run_scene(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    aggregate(cfg, seed, &outcomes)
}

/// Settings of the randomised gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckParams {
    pub instances: usize,
    /// Image side in pixels; a multiple of 16.
    pub size: usize,
    pub max_poses: usize,
    pub stages: usize,
    /// Half-width of the uniform perturbation added to the ground truth.
    pub perturbation: f64,
    pub step: f64,
}

impl Default for GradCheckParams {
    fn default() -> Self {
        Self {
            instances: 50,
            size: 32,
            max_poses: 2,
            stages: 2,
            perturbation: 0.05,
            step: 1e-4,
        }
    }
}

impl GradCheckParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::InvalidConfig(format!("gradcheck: size {} is not a positive multiple of 16", self.size)));
        }
        if self.max_poses == 0 || self.stages == 0 {
            return Err(Error::InvalidConfig("gradcheck: max_poses and stages must be positive".into()));
        }
        if !(self.perturbation >= 0.0 && self.step > 0.0) {
            return Err(Error::InvalidConfig("gradcheck: perturbation must be non-negative and step positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Instance holding the largest relative error.
    pub worst_instance: usize,
}

/// Random poses on a random depth image, encoded, then perturbed uniformly.
pub fn gradcheck_instance(
    cfg: &EncoderConfig,
    params: &GradCheckParams,
    seed: u64,
    index: usize,
) -> Result<(StagePredictions, EncodedMaps)> {
    let k = Skeleton::itop15().k;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(1000.0..5000.0f64).round()).collect();
    let raw = DepthImage::new(n, n, raw)?;
    let poses: Vec<Pose> = (0..rng.random_range(1..=params.max_poses))
        .map(|_| {
            Pose::new(
                (0..k)
                    .map(|_| {
                        let mut p = Part::new(
                            rng.random_range(0.0..(n - 1) as f64),
                            rng.random_range(0.0..(n - 1) as f64),
                            rng.random_range(1.0..5.0),
                        );
                        p.visible = rng.random_bool(0.8);
                        p
                    })
                    .collect(),
            )
        })
        .collect();
    let gt = encode(&poses, k, &raw, cfg)?;
    let mut pred = StagePredictions {
        stages: vec![gt.parts.clone(); params.stages],
        global: gt.global.clone(),
    };
    for e in entries_mut(&mut pred) {
        *e += rng.random_range(-1.0..=1.0) * params.perturbation;
    }
    Ok((pred, gt))
}

/// Checks analytic loss gradients against central differences on
/// `params.instances` random instances.
pub fn run_gradcheck(cfg: &EncoderConfig, params: &GradCheckParams, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    params.validate()?;
    let checks = (0..params.instances)
        .map(|i| {
            let (pred, gt) = gradcheck_instance(cfg, params, seed, i)?;
            gradient_check(&pred, &gt, params.step)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_gradcheck(seed, &checks))
}

/// Folds per-instance checks, in instance order, into a report.
pub fn summarize_gradcheck(seed: u64, checks: &[GradCheck]) -> GradCheckReport {
    let mut r = GradCheckReport {
        seed,
        instances: checks.len(),
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_instance: 0,
    };
    for (i, c) in checks.iter().enumerate() {
        r.entries += c.entries;
        r.max_abs_error = r.max_abs_error.max(c.max_abs_error);
        if c.max_rel_error > r.max_rel_error {
            r.max_rel_error = c.max_rel_error;
            r.worst_instance = i;
        }
    }
    r
}
