//! Synthetic depth scenes built from capsule figures, and an oracle that
//! turns ground-truth maps into noisy "network" outputs.
//!
//! The camera looks down +Z with X to the right and Y down, so a pixel ray
//! is `((x - cx)/fx, (y - cy)/fy, 1)` and the ray parameter is the depth.

use ndarray::{Array3, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedMaps, GlobalPoseMap, PartMaps, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY, PART_DX, PART_DY, PART_V, PART_Z};
use crate::encoder::{part_channel, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{project, Point3};
use crate::io::Mask;
use crate::loss::StagePredictions;
use crate::types::{iou, BBox, CameraIntrinsics, DepthImage, Part, Pose, Skeleton};

/// Articulated figure: one joint per skeleton part (metres, camera frame)
/// and one capsule radius per skeleton edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub joints: Vec<Point3>,
    pub radii: Vec<f64>,
}

impl FigureSpec {
    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.joints.len() != skeleton.k {
            return Err(Error::DimensionMismatch(format!(
                "figure has {} joints, skeleton has {}",
                self.joints.len(),
                skeleton.k
            )));
        }
        if self.radii.len() != skeleton.edges.len() {
            return Err(Error::DimensionMismatch(format!(
                "figure has {} radii, skeleton has {} edges",
                self.radii.len(),
                skeleton.edges.len()
            )));
        }
        if let Some(r) = self.radii.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig(format!("capsule radius {r} must be positive")));
        }
        Ok(())
    }

    /// Largest radius among the capsules meeting at joint `j`.
    fn joint_radius(&self, skeleton: &Skeleton, j: usize) -> f64 {
        skeleton
            .edges
            .iter()
            .zip(&self.radii)
            .filter(|((a, b), _)| *a == j || *b == j)
            .map(|(_, &r)| r)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    r: f64,
}

#[inline]
fn dot(u: [f64; 3], v: [f64; 3]) -> f64 {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
}

#[inline]
fn sub(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [u[0] - v[0], u[1] - v[1], u[2] - v[2]]
}

/// Nearest positive root of `a t² + 2 b t + c = 0` (the front face).
#[inline]
fn front_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let disc = b * b - a * c;
    if disc < 0.0 || a <= 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > 0.0).then_some(t)
}

fn ray_sphere(rd: [f64; 3], center: [f64; 3], r: f64) -> Option<f64> {
    // origin at the camera: oc = -center
    let oc = [-center[0], -center[1], -center[2]];
    front_root(dot(rd, rd), dot(rd, oc), dot(oc, oc) - r * r)
}

/// Ray parameter of the first hit of the ray `t·rd` with the capsule.
fn ray_capsule(rd: [f64; 3], cap: &Capsule) -> Option<f64> {
    let ba = sub(cap.b, cap.a);
    let oa = [-cap.a[0], -cap.a[1], -cap.a[2]];
    let baba = dot(ba, ba);
    let mut best = f64::INFINITY;
    if baba > 1e-18 {
        let bard = dot(ba, rd);
        let baoa = dot(ba, oa);
        let a = baba * dot(rd, rd) - bard * bard;
        let b = baba * dot(rd, oa) - baoa * bard;
        let c = baba * dot(oa, oa) - baoa * baoa - cap.r * cap.r * baba;
        if let Some(t) = front_root(a, b, c) {
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                best = t;
            }
        }
    }
    for center in [cap.a, cap.b] {
        if let Some(t) = ray_sphere(rd, center, cap.r) {
            best = best.min(t);
        }
    }
    best.is_finite().then_some(best)
}

/// Pixel rectangle that can see the capsule, or the whole frame when the
/// capsule reaches the camera plane.
fn pixel_bounds(cap: &Capsule, cam: &CameraIntrinsics, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let lo: Vec<f64> = (0..3).map(|i| cap.a[i].min(cap.b[i]) - cap.r).collect();
    let hi: Vec<f64> = (0..3).map(|i| cap.a[i].max(cap.b[i]) + cap.r).collect();
    if hi[2] <= 0.0 {
        return None;
    }
    if lo[2] <= 1e-3 {
        return Some((0, 0, w - 1, h - 1));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in &[lo[0], hi[0]] {
        for &y in &[lo[1], hi[1]] {
            for &z in &[lo[2], hi[2]] {
                let (u, v) = (cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z);
                x0 = x0.min(u);
                x1 = x1.max(u);
                y0 = y0.min(v);
                y1 = y1.max(v);
            }
        }
    }
    let (x0, y0) = (x0.floor().max(0.0), y0.floor().max(0.0));
    let (x1, y1) = (x1.ceil().min(w as f64 - 1.0), y1.ceil().min(h as f64 - 1.0));
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub depth: DepthImage,
    pub poses: Vec<Pose>,
    /// Pixels won by each figure in the z-buffer.
    pub masks: Vec<Mask>,
}

/// Ray-casts every figure's capsules at each pixel centre. Depth is the
/// nearest hit rounded to whole millimetres (0 where nothing is hit); ties
/// between figures go to the lower index.
///
/// Ground-truth joints are the projected joint centres. Joints outside the
/// frame are unlabeled. A joint is occluded when the front of its own joint
/// sphere lies more than `tol` metres behind the rendered surface at its
/// pixel.
pub fn render_scene(
    figures: &[FigureSpec],
    skeleton: &Skeleton,
    cam: &CameraIntrinsics,
    width: usize,
    height: usize,
    tol: f64,
) -> Result<RenderedScene> {
    for f in figures {
        f.validate(skeleton)?;
    }
    let n = width * height;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut owner = vec![usize::MAX; n];
    for (fi, fig) in figures.iter().enumerate() {
        let mut fig_best = vec![f64::INFINITY; n];
        for (&(ja, jb), &r) in skeleton.edges.iter().zip(&fig.radii) {
            let (pa, pb) = (fig.joints[ja], fig.joints[jb]);
            let cap = Capsule {
                a: [pa.x, pa.y, pa.z],
                b: [pb.x, pb.y, pb.z],
                r,
            };
            let Some((x0, y0, x1, y1)) = pixel_bounds(&cap, cam, width, height) else {
                continue;
            };
            for y in y0..=y1 {
                let ry = (y as f64 - cam.cy) / cam.fy;
                for x in x0..=x1 {
                    let rd = [(x as f64 - cam.cx) / cam.fx, ry, 1.0];
                    if let Some(t) = ray_capsule(rd, &cap) {
                        let i = y * width + x;
                        fig_best[i] = fig_best[i].min(t);
                    }
                }
            }
        }
        for i in 0..n {
            // strict comparison keeps the lower-index figure on ties
            if fig_best[i] < zbuf[i] {
                zbuf[i] = fig_best[i];
                owner[i] = fi;
            }
        }
    }
    let data: Vec<f64> = zbuf
        .iter()
        .map(|&t| if t.is_finite() { (t * 1000.0).round() } else { 0.0 })
        .collect();
    let depth = DepthImage::new(width, height, data)?;
    let masks = (0..figures.len())
        .map(|fi| Mask::new(width, height, owner.iter().map(|&o| o == fi).collect()))
        .collect::<Result<Vec<_>>>()?;
    let poses = figures
        .iter()
        .map(|fig| {
            let parts = fig
                .joints
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let Ok((x, y)) = project(p, cam) else {
                        return Part::unlabeled();
                    };
                    let inside = x >= -0.5 && y >= -0.5 && x < width as f64 - 0.5 && y < height as f64 - 0.5;
                    if !inside {
                        return Part::unlabeled();
                    }
                    let i = y.round() as usize * width + x.round() as usize;
                    let ray_len = (((x - cam.cx) / cam.fx).powi(2) + ((y - cam.cy) / cam.fy).powi(2) + 1.0).sqrt();
                    let front = p.z - fig.joint_radius(skeleton, j) / ray_len;
                    let mut part = Part::new(x, y, p.z);
                    part.visible = !(front - zbuf[i] > tol);
                    part
                })
                .collect();
            Pose::new(parts)
        })
        .collect();
    Ok(RenderedScene { depth, poses, masks })
}

/// Standing figure template for the default 15-part skeleton, in metres
/// relative to the torso joint, with per-edge capsule radii.
pub fn template_figure() -> (Vec<[f64; 3]>, Vec<f64>) {
    let joints = vec![
        [0.0, -0.60, 0.0],   // head
        [0.0, -0.40, 0.0],   // neck
        [-0.18, -0.38, 0.0], // r_shoulder
        [0.18, -0.38, 0.0],  // l_shoulder
        [-0.24, -0.11, 0.0], // r_elbow
        [0.24, -0.11, 0.0],  // l_elbow
        [-0.26, 0.14, 0.0],  // r_hand
        [0.26, 0.14, 0.0],   // l_hand
        [0.0, -0.12, 0.0],   // torso
        [-0.10, 0.10, 0.0],  // r_hip
        [0.10, 0.10, 0.0],   // l_hip
        [-0.11, 0.52, 0.0],  // r_knee
        [0.11, 0.52, 0.0],   // l_knee
        [-0.12, 0.92, 0.0],  // r_foot
        [0.12, 0.92, 0.0],   // l_foot
    ];
    // same order as the default skeleton's edges
    let radii = vec![0.09, 0.06, 0.06, 0.05, 0.04, 0.05, 0.04, 0.13, 0.10, 0.10, 0.07, 0.05, 0.07, 0.05];
    (joints, radii)
}

fn rot_y(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

fn rot_x(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]]
}

fn rot_z(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Parent of every joint when the edge list is walked outward from `root`.
fn bone_order(skeleton: &Skeleton, root: usize) -> Vec<(usize, usize)> {
    let mut seen = vec![false; skeleton.k];
    seen[root] = true;
    let mut order = Vec::new();
    let mut frontier = vec![root];
    while let Some(p) = frontier.pop() {
        for &(a, b) in &skeleton.edges {
            let c = if a == p { b } else if b == p { a } else { continue };
            if !seen[c] {
                seen[c] = true;
                order.push((p, c));
                frontier.push(c);
            }
        }
    }
    order
}

/// Scene sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Maximum bone rotation in radians.
    pub jitter: f64,
    /// Places every figure after the first next to it and further away.
    pub force_overlap: bool,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Largest allowed IOU between the in-frame boxes of two figures.
    pub max_pair_iou: f64,
    /// Smallest allowed Chebyshev distance between two box centres, in pixels.
    pub min_center_sep: f64,
    /// Draws per figure before it is left out of the scene.
    pub max_tries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            jitter: 0.35,
            force_overlap: false,
            min_depth: 1.5,
            max_depth: 4.5,
            max_pair_iou: 0.3,
            min_center_sep: 16.0,
            max_tries: 64,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidConfig(format!("scene: jitter must be finite and non-negative, got {}", self.jitter)));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scene: need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) || !(self.min_center_sep >= 0.0) {
            return Err(Error::InvalidConfig("scene: max_pair_iou must lie in [0, 1] and min_center_sep be non-negative".into()));
        }
        Ok(())
    }
}

/// Box of the projected joints, clipped to the frame.
fn frame_box(joints: &[Point3], cam: &CameraIntrinsics, width: usize, height: usize) -> Option<BBox> {
    let pts: Vec<(f64, f64)> = joints.iter().filter_map(|j| project(j, cam).ok()).collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| pts.iter().map(pick).fold(init, f);
    let b = BBox::new(
        fold(f64::min, f64::INFINITY, |p| p.0).max(0.0),
        fold(f64::min, f64::INFINITY, |p| p.1).max(0.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0).min(width as f64 - 1.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1).min(height as f64 - 1.0),
    );
    (b.width() > 0.0 && b.height() > 0.0).then_some(b)
}

fn separated(a: &BBox, b: &BBox, params: &SceneParams) -> bool {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    iou(a, b) <= params.max_pair_iou && (ax - bx).abs().max((ay - by).abs()) >= params.min_center_sep
}

/// Deterministic random figures for the default skeleton, each standing with
/// its torso between `min_depth` and `max_depth` metres and its torso ray
/// inside the central part of the view of a `width × height` camera.
///
/// Figures are redrawn until their boxes are separated from the ones already
/// placed (`max_pair_iou`, `min_center_sep`); a figure that still collides
/// after `max_tries` draws is dropped, so fewer than `n_figures` may return.
pub fn sample_random_scene(
    seed: u64,
    n_figures: usize,
    params: &SceneParams,
    cam: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Vec<FigureSpec> {
    let skeleton = Skeleton::itop15();
    let (template, radii) = template_figure();
    let bones = bone_order(&skeleton, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut figures: Vec<FigureSpec> = Vec::with_capacity(n_figures);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_figures);
    let mut first: Option<(f64, f64, f64)> = None;
    for _ in 0..n_figures {
        for _ in 0..params.max_tries.max(1) {
            let scale = rng.random_range(0.9..1.1);
            let yaw = rng.random_range(-0.6..0.6);
            let mut local = template.clone();
            for &(p, c) in &bones {
                let off = sub(template[c], template[p]);
                let off = rot_z(rot_x(off, rng.random_range(-params.jitter..=params.jitter)), rng.random_range(-params.jitter..=params.jitter));
                local[c] = [local[p][0] + off[0], local[p][1] + off[1], local[p][2] + off[2]];
            }
            let (u, v, z) = match (first, params.force_overlap) {
                (Some((u0, v0, z0)), true) => {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (
                        u0 + side * rng.random_range(0.05..0.18) * width as f64,
                        v0 + rng.random_range(-0.05..0.05) * height as f64,
                        (z0 + rng.random_range(0.4..1.2)).min(params.max_depth + 1.0),
                    )
                }
                _ => (
                    rng.random_range(0.2..0.8) * width as f64,
                    rng.random_range(0.4..0.6) * height as f64,
                    rng.random_range(params.min_depth..params.max_depth),
                ),
            };
            let root = [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z];
            let joints: Vec<Point3> = local
                .iter()
                .map(|&j| {
                    let q = rot_y([j[0] * scale, j[1] * scale, j[2] * scale], yaw);
                    Point3::new(root[0] + q[0], root[1] + q[1], root[2] + q[2])
                })
                .collect();
            let Some(b) = frame_box(&joints, cam, width, height) else { continue };
            if !boxes.iter().all(|o| separated(o, &b, params)) {
                continue;
            }
            if first.is_none() {
                first = Some((u, v, z));
            }
            boxes.push(b);
            figures.push(FigureSpec {
                joints,
                radii: radii.iter().map(|r| r * scale).collect(),
            });
            break;
        }
    }
    figures
}

/// Per-family oracle noise. Positional pose-map channels are in stride-16
/// grid units, displacements in stride-8 grid units, depths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    pub heat_sigma: f64,
    /// Part depth maps and the pose map's depth channels.
    pub depth_sigma: f64,
    pub disp_sigma: f64,
    /// Box and part offsets of the pose map.
    pub pose_sigma: f64,
    /// Objectness and visibility channels.
    pub score_sigma: f64,
    /// Displacement noise per unit of nearby field discontinuity; see
    /// [`confusion_scale`].
    pub confusion_gain: f64,
    /// Dilation of the discontinuity map, in cells.
    pub confusion_reach: usize,
    pub stages: usize,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            heat_sigma: 0.0,
            depth_sigma: 0.0,
            disp_sigma: 0.0,
            pose_sigma: 0.0,
            score_sigma: 0.0,
            confusion_gain: 0.0,
            confusion_reach: 4,
            stages: 2,
            seed: 0,
        }
    }
}

impl OracleNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("heat_sigma", self.heat_sigma),
            ("depth_sigma", self.depth_sigma),
            ("disp_sigma", self.disp_sigma),
            ("pose_sigma", self.pose_sigma),
            ("score_sigma", self.score_sigma),
            ("confusion_gain", self.confusion_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("oracle: {name} must be non-negative, got {v}")));
            }
        }
        if self.stages == 0 {
            return Err(Error::InvalidConfig("oracle: at least one stage".into()));
        }
        Ok(())
    }
}

// independent random streams per noise family
const STREAM_CONFUSION: u64 = 1;
const STREAM_POSE: u64 = 2;

fn stage_stream(stage: usize, family: u64) -> u64 {
    16 + 8 * stage as u64 + family
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_noise<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in a.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
}

/// Magnitude of the largest jump of the supervised displacement target
/// `c + (X, Y)` between 4-neighbouring supervised cells, dilated by `reach`.
///
/// Jumps appear where the nearest instance changes, so the map is zero for
/// isolated instances and grows with the truncation radius.
pub fn confusion_scale(maps: &EncodedMaps, reach: usize) -> Array3<f64> {
    let (x, y, wt) = (&maps.parts.disp_x, &maps.parts.disp_y, &maps.weights.disp);
    let (k, gh, gw) = x.dim();
    let mut jump = Array3::<f64>::zeros((k, gh, gw));
    for j in 0..k {
        for v in 0..gh {
            for u in 0..gw {
                if wt[[j, v, u]] == 0.0 {
                    continue;
                }
                for (du, dv) in [(1usize, 0usize), (0, 1)] {
                    let (u2, v2) = (u + du, v + dv);
                    if u2 >= gw || v2 >= gh || wt[[j, v2, u2]] == 0.0 {
                        continue;
                    }
                    let tx = (du as f64 + x[[j, v2, u2]]) - x[[j, v, u]];
                    let ty = (dv as f64 + y[[j, v2, u2]]) - y[[j, v, u]];
                    let d = tx.hypot(ty);
                    jump[[j, v, u]] = f64::max(jump[[j, v, u]], d);
                    jump[[j, v2, u2]] = f64::max(jump[[j, v2, u2]], d);
                }
            }
        }
    }
    if reach == 0 {
        return jump;
    }
    // square dilation, separable
    let r = reach as isize;
    let mut rows = Array3::<f64>::zeros((k, gh, gw));
    for j in 0..k {
        for v in 0..gh {
            for u in 0..gw {
                let mut m = 0.0f64;
                for d in -r..=r {
                    let uu = u as isize + d;
                    if uu >= 0 && (uu as usize) < gw {
                        m = m.max(jump[[j, v, uu as usize]]);
                    }
                }
                rows[[j, v, u]] = m;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((k, gh, gw));
    for j in 0..k {
        for v in 0..gh {
            for u in 0..gw {
                let mut m = 0.0f64;
                for d in -r..=r {
                    let vv = v as isize + d;
                    if vv >= 0 && (vv as usize) < gh {
                        m = m.max(rows[[j, vv as usize, u]]);
                    }
                }
                out[[j, v, u]] = m;
            }
        }
    }
    out
}

/// Stand-in for a trained network: `stages` copies of the ground-truth part
/// maps plus the ground-truth pose map, each perturbed with seeded Gaussian
/// noise per map family. Confidences, objectness and visibility are clamped
/// to `[0, 1]`.
///
/// The confusion term adds displacement noise scaled by
/// [`confusion_scale`]; its unit normal field depends only on the seed and
/// the map shape, so encodings that differ only in truncation radius see the
/// same draw.
pub fn oracle_predict(gt: &EncodedMaps, noise: &OracleNoise) -> Result<StagePredictions> {
    noise.validate()?;
    let confusion = if noise.confusion_gain > 0.0 {
        let scale = confusion_scale(gt, noise.confusion_reach);
        let mut rng = rng_for(noise.seed, STREAM_CONFUSION);
        let mut fx = Array3::<f64>::zeros(scale.raw_dim());
        let mut fy = Array3::<f64>::zeros(scale.raw_dim());
        add_noise(&mut fx, 1.0, &mut rng);
        add_noise(&mut fy, 1.0, &mut rng);
        Some((scale, fx, fy))
    } else {
        None
    };
    let stages = (0..noise.stages)
        .map(|s| {
            let mut m = gt.parts.clone();
            add_noise(&mut m.heat, noise.heat_sigma, &mut rng_for(noise.seed, stage_stream(s, 0)));
            add_noise(&mut m.depth, noise.depth_sigma, &mut rng_for(noise.seed, stage_stream(s, 1)));
            let mut rng = rng_for(noise.seed, stage_stream(s, 2));
            add_noise(&mut m.disp_x, noise.disp_sigma, &mut rng);
            add_noise(&mut m.disp_y, noise.disp_sigma, &mut rng);
            if let Some((scale, fx, fy)) = &confusion {
                let g = noise.confusion_gain;
                Zip::from(&mut m.disp_x).and(scale).and(fx).for_each(|x, &c, &n| *x += g * c * n);
                Zip::from(&mut m.disp_y).and(scale).and(fy).for_each(|y, &c, &n| *y += g * c * n);
            }
            m.heat.mapv_inplace(|v| v.clamp(0.0, 1.0));
            m
        })
        .collect();
    let mut values = gt.global.values.clone();
    perturb_pose_map(&mut values, noise);
    Ok(StagePredictions {
        stages,
        global: GlobalPoseMap { values },
    })
}

fn perturb_pose_map(values: &mut Array4<f64>, noise: &OracleNoise) {
    let (a_count, ch, gh, gw) = values.dim();
    let k = (ch - BOX_CHANNELS) / 4;
    let mut rng = rng_for(noise.seed, STREAM_POSE);
    let mut draw = |sigma: f64| -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        sigma * n
    };
    let positional: Vec<usize> = [CH_TX, CH_TY, CH_TW, CH_TH]
        .into_iter()
        .chain((0..k).flat_map(|j| [part_channel(j, PART_DX), part_channel(j, PART_DY)]))
        .collect();
    let depth: Vec<usize> = (0..k).map(|j| part_channel(j, PART_Z)).collect();
    let scores: Vec<usize> = std::iter::once(CH_OBJ)
        .chain((0..k).map(|j| part_channel(j, PART_V)))
        .collect();
    for a in 0..a_count {
        for v in 0..gh {
            for u in 0..gw {
                // draws are made for every channel so each family's stream
                // position is independent of the other sigmas
                for &c in &positional {
                    values[[a, c, v, u]] += draw(noise.pose_sigma);
                }
                for &c in &depth {
                    values[[a, c, v, u]] += draw(noise.depth_sigma);
                }
                for &c in &scores {
                    let x = values[[a, c, v, u]] + draw(noise.score_sigma);
                    values[[a, c, v, u]] = x.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// All-zero prediction shaped like `gt`.
pub fn zero_prediction(gt: &EncodedMaps, stages: usize) -> StagePredictions {
    let grid = gt.parts.grid();
    StagePredictions {
        stages: vec![PartMaps::zeros(gt.parts.k(), &grid); stages],
        global: GlobalPoseMap::zeros(gt.global.anchors(), gt.global.k(), &gt.global.grid()),
    }
}
