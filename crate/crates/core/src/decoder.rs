//! From predicted maps to 3D poses.
//!
//! Global poses come out of the stride-16 map after thresholding and greedy
//! NMS. Each global part is then resolved into one of three modes:
//!
//! - **A**: little part confidence around the global position; keep the
//!   global part as is.
//! - **B**: confident and unoccluded; move the part along the displacement
//!   field and average the displaced targets and depths over a square mask,
//!   weighted by part confidence.
//! - **C**: the visibility channel says the part is hidden behind another
//!   instance of the same type, so the part maps describe the occluder; keep
//!   the global part.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    part_channel, GlobalPoseMap, PartMaps, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY, PART_DX, PART_DY,
    PART_V, PART_Z,
};
use crate::error::{Error, Result};
use crate::types::{iou, BBox, Detection, Part, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// The aggregation mask is `(2·mask_half + 1)²` cells.
    pub mask_half: usize,
    pub conf_thresh: f64,
    pub vis_thresh: f64,
    pub nms_iou: f64,
    pub obj_thresh: f64,
    /// When false every part is forced to mode A (global-only decoding).
    pub fusion: bool,
    /// When false the visibility channel is ignored and mode C never fires.
    pub resolve_occlusion: bool,
    /// Cells whose displacement target lies further than this (grid units)
    /// from the displaced global part do not vote; `inf` lets every cell of
    /// the mask vote.
    #[serde(with = "crate::encoder::radius_serde")]
    pub vote_gate: f64,
    /// Voting cells whose depth differs from the global depth by more than
    /// this (metres) are left out of the depth average; `inf` keeps them all.
    #[serde(with = "crate::encoder::radius_serde")]
    pub depth_gate: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mask_half: 2,
            conf_thresh: 0.2,
            vis_thresh: 0.5,
            nms_iou: 0.45,
            obj_thresh: 0.5,
            fusion: true,
            resolve_occlusion: true,
            vote_gate: 1.5,
            depth_gate: 0.15,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf_thresh", self.conf_thresh),
            ("vis_thresh", self.vis_thresh),
            ("nms_iou", self.nms_iou),
            ("obj_thresh", self.obj_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "fusion: {name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for (name, v) in [("vote_gate", self.vote_gate), ("depth_gate", self.depth_gate)] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("fusion: {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    A,
    B,
    C,
}

/// Output of the fusion step, in pixels and metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPart {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub mode: FusionMode,
}

/// A global pose candidate together with its per-part occlusion scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDetection {
    pub detection: Detection,
    /// Activated visibility channel `v̂_j`; high means occluded.
    pub occlusion: Vec<f64>,
}

/// Threshold, invert the box/part encoding and run greedy NMS.
pub fn decode_global_poses(
    map: &GlobalPoseMap,
    anchors: &[(f64, f64)],
    cfg: &FusionConfig,
) -> Result<Vec<GlobalDetection>> {
    if anchors.len() != map.anchors() {
        return Err(Error::DimensionMismatch(format!(
            "pose map has {} anchors, configuration lists {}",
            map.anchors(),
            anchors.len()
        )));
    }
    let grid = map.grid();
    let k = map.k();
    let stride = grid.stride as f64;
    let mut candidates = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        for cv in 0..grid.gh {
            for cu in 0..grid.gw {
                let cell = map.values.slice(ndarray::s![a, .., cv, cu]);
                let score = cell[CH_OBJ];
                if !(score >= cfg.obj_thresh) {
                    continue;
                }
                let cx = (cu as f64 + cell[CH_TX]) * stride;
                let cy = (cv as f64 + cell[CH_TY]) * stride;
                let w = aw * cell[CH_TW].exp() * stride;
                let h = ah * cell[CH_TH].exp() * stride;
                let (ox, oy) = (cu as f64 + 0.5, cv as f64 + 0.5);
                let mut occlusion = Vec::with_capacity(k);
                let parts = (0..k)
                    .map(|j| {
                        let v = cell[part_channel(j, PART_V)];
                        occlusion.push(v);
                        let z = cell[part_channel(j, PART_Z)];
                        Part {
                            x: (ox + cell[part_channel(j, PART_DX)]) * stride,
                            y: (oy + cell[part_channel(j, PART_DY)]) * stride,
                            z,
                            visible: v < cfg.vis_thresh,
                            labeled: z > 0.0,
                        }
                    })
                    .collect();
                candidates.push(GlobalDetection {
                    detection: Detection {
                        bbox: BBox::from_center(cx, cy, w, h),
                        score: score.clamp(0.0, 1.0),
                        pose: Pose::new(parts),
                    },
                    occlusion,
                });
            }
        }
    }
    Ok(nms(candidates, cfg.nms_iou))
}

/// Greedy NMS: highest score first (ties keep input order); drop anything
/// overlapping a kept box by more than `thresh`.
pub fn nms(mut candidates: Vec<GlobalDetection>, thresh: f64) -> Vec<GlobalDetection> {
    candidates.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
    let mut kept: Vec<GlobalDetection> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| iou(&k.detection.bbox, &c.detection.bbox) <= thresh)
        {
            kept.push(c);
        }
    }
    kept
}

fn mask_range(center: i64, half: i64, n: usize) -> std::ops::Range<usize> {
    let lo = (center - half).max(0);
    let hi = (center + half + 1).min(n as i64);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

/// Displacement-guided fusion of one global part given in stride-8 grid
/// coordinates `(gx, gy)` with global depth `gz`.
///
/// The displacement is read at the nearest cell (clamped into the grid).
/// Over the mask centred at the floor of the displaced position, every cell
/// votes for the position it points to, `(u + X, v + Y)`, and for its depth,
/// weighted by the part confidence. Cells pointing further than
/// `vote_gate` from the displaced position belong to another instance and
/// abstain; depths further than `depth_gate` from `gz` stay out of the depth
/// average, which falls back to `gz` when nothing is left. Without
/// confidence mass the global part is returned in mode A.
pub fn fuse_part(gx: f64, gy: f64, gz: f64, j: usize, maps: &PartMaps, cfg: &FusionConfig) -> FusedPart {
    let grid = maps.grid();
    let stride = grid.stride as f64;
    let fallback = FusedPart {
        x: gx * stride,
        y: gy * stride,
        z: gz,
        mode: FusionMode::A,
    };
    let (cu, cv) = grid.clamped_cell(gx, gy);
    let xb = gx + maps.disp_x[[j, cv, cu]];
    let yb = gy + maps.disp_y[[j, cv, cu]];
    if !xb.is_finite() || !yb.is_finite() {
        return fallback;
    }
    let (bx, by) = (xb.floor() as i64, yb.floor() as i64);
    let half = cfg.mask_half as i64;
    let gate2 = cfg.vote_gate * cfg.vote_gate;
    let (mut sh, mut sx, mut sy) = (0.0, 0.0, 0.0);
    let (mut shz, mut sz) = (0.0, 0.0);
    for v in mask_range(by, half, grid.gh) {
        for u in mask_range(bx, half, grid.gw) {
            let tx = u as f64 + maps.disp_x[[j, v, u]];
            let ty = v as f64 + maps.disp_y[[j, v, u]];
            if (tx - xb).powi(2) + (ty - yb).powi(2) > gate2 {
                continue;
            }
            let w = maps.heat[[j, v, u]];
            sh += w;
            sx += w * tx;
            sy += w * ty;
            let d = maps.depth[[j, v, u]];
            if (d - gz).abs() <= cfg.depth_gate {
                shz += w;
                sz += w * d;
            }
        }
    }
    if sh < 1e-8 {
        return fallback;
    }
    FusedPart {
        x: sx / sh * stride,
        y: sy / sh * stride,
        z: if shz < 1e-8 { gz } else { sz / shz },
        mode: FusionMode::B,
    }
}

/// Picks the conflict-resolution mode for global part `j` at grid position
/// `(gx, gy)` with predicted occlusion score `occlusion`.
pub fn resolve_mode(gx: f64, gy: f64, occlusion: f64, j: usize, maps: &PartMaps, cfg: &FusionConfig) -> FusionMode {
    if !cfg.fusion {
        return FusionMode::A;
    }
    if cfg.resolve_occlusion && occlusion >= cfg.vis_thresh {
        return FusionMode::C;
    }
    let grid = maps.grid();
    let (cu, cv) = grid.clamped_cell(gx, gy);
    let half = cfg.mask_half as i64;
    let mut peak = f64::NEG_INFINITY;
    for v in mask_range(cv as i64, half, grid.gh) {
        for u in mask_range(cu as i64, half, grid.gw) {
            peak = peak.max(maps.heat[[j, v, u]]);
        }
    }
    if peak < cfg.conf_thresh {
        FusionMode::A
    } else {
        FusionMode::B
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedPart {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub visible: bool,
    pub labeled: bool,
    pub mode: FusionMode,
}

/// Final pose; serialises as the core pose schema plus score, box and
/// per-part mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPose {
    pub score: f64,
    pub bbox: BBox,
    pub parts: Vec<DecodedPart>,
}

impl DecodedPose {
    pub fn pose(&self) -> Pose {
        Pose::new(
            self.parts
                .iter()
                .map(|p| Part {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    visible: p.visible,
                    labeled: p.labeled,
                })
                .collect(),
        )
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            score: self.score,
            pose: self.pose(),
        }
    }
}

/// Full decoding: NMS over the global pose map, then per-part mode selection
/// and fusion. Parts whose final depth is not positive are marked unlabeled.
pub fn decode_full(
    parts: &PartMaps,
    global: &GlobalPoseMap,
    anchors: &[(f64, f64)],
    cfg: &FusionConfig,
) -> Result<Vec<DecodedPose>> {
    if parts.k() != global.k() {
        return Err(Error::DimensionMismatch(format!(
            "part maps have {} parts, pose map has {}",
            parts.k(),
            global.k()
        )));
    }
    let stride = parts.grid().stride as f64;
    let detections = decode_global_poses(global, anchors, cfg)?;
    Ok(detections
        .into_iter()
        .map(|gd| {
            let parts_out = gd
                .detection
                .pose
                .parts
                .iter()
                .enumerate()
                .map(|(j, gp)| {
                    let (gx, gy) = (gp.x / stride, gp.y / stride);
                    let mode = resolve_mode(gx, gy, gd.occlusion[j], j, parts, cfg);
                    let fused = match mode {
                        FusionMode::B => fuse_part(gx, gy, gp.z, j, parts, cfg),
                        m => FusedPart {
                            x: gp.x,
                            y: gp.y,
                            z: gp.z,
                            mode: m,
                        },
                    };
                    DecodedPart {
                        x: fused.x,
                        y: fused.y,
                        z: fused.z,
                        visible: gp.visible,
                        labeled: fused.z > 0.0,
                        mode: fused.mode,
                    }
                })
                .collect();
            DecodedPose {
                score: gd.detection.score,
                bbox: gd.detection.bbox,
                parts: parts_out,
            }
        })
        .collect())
}
