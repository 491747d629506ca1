//! PCK and MPII-style mAP in 2D and 3D.
//!
//! Predictions are matched to ground truth greedily by box IOU, highest score
//! first. A part is correct when it lies strictly within the threshold of its
//! matched ground truth: half the GT head segment in 2D, 10 cm in 3D (after
//! back-projection with the evaluation camera).
//!
//! Conventions the metrics depend on:
//! * a predicted part whose matched GT part is unlabeled counts neither as a
//!   true nor as a false positive;
//! * predictions with equal scores form one step of the precision-recall
//!   curve, so AP does not depend on their input order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::backproject;
use crate::types::{bbox_from_pose, iou, CameraIntrinsics, Detection, Part, Pose, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// 2D threshold as a fraction of the head segment length.
    pub pck2d_factor: f64,
    /// 3D threshold in metres.
    pub pck3d_thresh: f64,
    /// Minimum box IOU for a prediction to match a ground-truth pose.
    pub match_iou: f64,
    /// Head segment length (px) used when head and neck coincide or are
    /// unlabeled.
    pub head_fallback: f64,
    /// Margin used when deriving GT boxes for matching.
    pub bbox_margin: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            pck2d_factor: 0.5,
            pck3d_thresh: 0.10,
            match_iou: 0.4,
            head_fallback: 10.0,
            bbox_margin: 0.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pck2d_factor", self.pck2d_factor),
            ("pck3d_thresh", self.pck3d_thresh),
            ("head_fallback", self.head_fallback),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.match_iou) {
            return Err(Error::InvalidConfig(format!("match_iou must be in [0, 1], got {}", self.match_iou)));
        }
        if !(self.bbox_margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("bbox_margin must be non-negative, got {}", self.bbox_margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

/// Greedy score-ordered matching. Entry `i` of the result is the GT index
/// matched to `preds[i]`. Equal scores keep input order; equal IOUs go to
/// the lower GT index. GT poses without labeled parts never match.
pub fn match_by_iou(preds: &[Detection], gts: &[Pose], cfg: &MetricConfig) -> Vec<Option<usize>> {
    let gt_boxes: Vec<_> = gts.iter().map(|g| bbox_from_pose(g, cfg.bbox_margin).ok()).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt_boxes.iter().enumerate() {
            let Some(gb) = gb else { continue };
            if taken[g] {
                continue;
            }
            let o = iou(&preds[i].bbox, gb);
            if o >= cfg.match_iou && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

fn head_size(gt: &Pose, skeleton: &Skeleton, fallback: f64) -> f64 {
    let (h, n) = skeleton.head_pair;
    let (a, b) = (&gt.parts[h], &gt.parts[n]);
    if a.labeled && b.labeled {
        let d = (a.x - b.x).hypot(a.y - b.y);
        if d > 1e-9 {
            return d;
        }
    }
    fallback
}

struct Judge<'a> {
    skeleton: &'a Skeleton,
    cam: &'a CameraIntrinsics,
    cfg: &'a MetricConfig,
}

impl Judge<'_> {
    fn correct(&self, pred: &Part, gt: &Part, gt_pose: &Pose, space: Space) -> bool {
        if !pred.labeled {
            return false;
        }
        match space {
            Space::D2 => {
                let thr = self.cfg.pck2d_factor * head_size(gt_pose, self.skeleton, self.cfg.head_fallback);
                (pred.x - gt.x).hypot(pred.y - gt.y) < thr
            }
            Space::D3 => match (
                backproject(pred.x, pred.y, pred.z, self.cam),
                backproject(gt.x, gt.y, gt.z, self.cam),
            ) {
                (Ok(p), Ok(g)) => p.distance(&g) < self.cfg.pck3d_thresh,
                _ => false,
            },
        }
    }
}

const SPACES: [Space; 2] = [Space::D2, Space::D3];

fn space_index(s: Space) -> usize {
    match s {
        Space::D2 => 0,
        Space::D3 => 1,
    }
}

/// Accumulates PCK and AP statistics over any number of scenes.
#[derive(Debug, Clone)]
pub struct Evaluator {
    skeleton: Skeleton,
    cam: CameraIntrinsics,
    cfg: MetricConfig,
    correct: [Vec<usize>; 2],
    total: Vec<usize>,
    /// (score, true positive) per space and part.
    ranked: [Vec<Vec<(f64, bool)>>; 2],
    matched: usize,
    false_positives: usize,
    missed: usize,
    scenes: usize,
}

impl Evaluator {
    pub fn new(skeleton: &Skeleton, cam: &CameraIntrinsics, cfg: &MetricConfig) -> Result<Self> {
        skeleton.validate()?;
        cam.validate()?;
        cfg.validate()?;
        let k = skeleton.k;
        Ok(Self {
            skeleton: skeleton.clone(),
            cam: *cam,
            cfg: *cfg,
            correct: [vec![0; k], vec![0; k]],
            total: vec![0; k],
            ranked: [vec![Vec::new(); k], vec![Vec::new(); k]],
            matched: 0,
            false_positives: 0,
            missed: 0,
            scenes: 0,
        })
    }

    pub fn add_scene(&mut self, preds: &[Detection], gts: &[Pose]) -> Result<()> {
        let k = self.skeleton.k;
        for p in gts.iter().chain(preds.iter().map(|d| &d.pose)) {
            p.validate(k)?;
        }
        let assignment = match_by_iou(preds, gts, &self.cfg);
        let judge = Judge {
            skeleton: &self.skeleton,
            cam: &self.cam,
            cfg: &self.cfg,
        };
        let mut gt_match = vec![None; gts.len()];
        for (i, a) in assignment.iter().enumerate() {
            match a {
                Some(g) => {
                    gt_match[*g] = Some(i);
                    self.matched += 1;
                }
                None => self.false_positives += 1,
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            if gt_match[g].is_none() && gt.labeled_count() > 0 {
                self.missed += 1;
            }
            for (j, gp) in gt.labeled() {
                self.total[j] += 1;
                if let Some(i) = gt_match[g] {
                    for s in SPACES {
                        if judge.correct(&preds[i].pose.parts[j], gp, gt, s) {
                            self.correct[space_index(s)][j] += 1;
                        }
                    }
                }
            }
        }
        for (i, det) in preds.iter().enumerate() {
            for (j, pp) in det.pose.parts.iter().enumerate() {
                if !pp.labeled {
                    continue;
                }
                for s in SPACES {
                    let tp = match assignment[i] {
                        Some(g) if !gts[g].parts[j].labeled => continue,
                        Some(g) => judge.correct(pp, &gts[g].parts[j], &gts[g], s),
                        None => false,
                    };
                    self.ranked[space_index(s)][j].push((det.score, tp));
                }
            }
        }
        self.scenes += 1;
        Ok(())
    }

    pub fn pck(&self, space: Space) -> PartScores {
        let c = &self.correct[space_index(space)];
        PartScores::from_parts(
            (0..self.skeleton.k)
                .map(|j| (self.total[j] > 0).then(|| c[j] as f64 / self.total[j] as f64))
                .collect(),
        )
    }

    pub fn average_precision(&self, space: Space) -> PartScores {
        let r = &self.ranked[space_index(space)];
        PartScores::from_parts(
            (0..self.skeleton.k)
                .map(|j| (self.total[j] > 0).then(|| average_precision(&r[j], self.total[j])))
                .collect(),
        )
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            parts: self.skeleton.names.clone(),
            pck_2d: self.pck(Space::D2),
            pck_3d: self.pck(Space::D3),
            ap_2d: self.average_precision(Space::D2),
            ap_3d: self.average_precision(Space::D3),
            counts: MatchCounts {
                scenes: self.scenes,
                matched: self.matched,
                false_positives: self.false_positives,
                missed: self.missed,
            },
        }
    }
}

/// All-point interpolated AP of a ranked list against `n_gt` positives.
/// Equal scores are processed as one block.
pub fn average_precision(items: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            tp += sorted[i].1 as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    // precision envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Per-part values (`None` where the part has no ground truth) and their
/// mean over the parts that have a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartScores {
    pub per_part: Vec<Option<f64>>,
    pub mean: f64,
}

impl PartScores {
    fn from_parts(per_part: Vec<Option<f64>>) -> Self {
        let vals: Vec<f64> = per_part.iter().flatten().copied().collect();
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        Self { per_part, mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub scenes: usize,
    /// Predictions matched to a ground-truth pose.
    pub matched: usize,
    /// Predictions left unmatched.
    pub false_positives: usize,
    /// Ground-truth poses left unmatched.
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub parts: Vec<String>,
    pub pck_2d: PartScores,
    pub pck_3d: PartScores,
    pub ap_2d: PartScores,
    pub ap_3d: PartScores,
    pub counts: MatchCounts,
}

impl EvalReport {
    /// Fixed-width table, one row per part plus the mean.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:>9.4}", v),
            None => format!("{:>9}", "-"),
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9} {:>9}", "part", "2D PCK", "3D PCK", "2D mAP", "3D mAP");
        for (j, name) in self.parts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<12} {} {} {} {}",
                name,
                fmt(self.pck_2d.per_part[j]),
                fmt(self.pck_3d.per_part[j]),
                fmt(self.ap_2d.per_part[j]),
                fmt(self.ap_3d.per_part[j])
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {} {} {} {}",
            "mean",
            fmt(Some(self.pck_2d.mean)),
            fmt(Some(self.pck_3d.mean)),
            fmt(Some(self.ap_2d.mean)),
            fmt(Some(self.ap_3d.mean))
        );
        let c = &self.counts;
        let _ = writeln!(
            s,
            "scenes {}  matched {}  false positives {}  missed {}",
            c.scenes, c.matched, c.false_positives, c.missed
        );
        s
    }
}

/// Single-scene PCK.
pub fn pck(
    preds: &[Detection],
    gts: &[Pose],
    skeleton: &Skeleton,
    cam: &CameraIntrinsics,
    cfg: &MetricConfig,
    space: Space,
) -> Result<PartScores> {
    let mut ev = Evaluator::new(skeleton, cam, cfg)?;
    ev.add_scene(preds, gts)?;
    Ok(ev.pck(space))
}

/// Single-scene per-part AP and mAP.
pub fn map_score(
    preds: &[Detection],
    gts: &[Pose],
    skeleton: &Skeleton,
    cam: &CameraIntrinsics,
    cfg: &MetricConfig,
    space: Space,
) -> Result<PartScores> {
    let mut ev = Evaluator::new(skeleton, cam, cfg)?;
    ev.add_scene(preds, gts)?;
    Ok(ev.average_precision(space))
}
