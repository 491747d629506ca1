//! Domain types shared by every stage of the pipeline, plus box utilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Part set definition: names, left/right swap pairs, the head segment used
/// for 2D PCK normalisation and the limb edges used for rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub k: usize,
    pub names: Vec<String>,
    pub flip_pairs: Vec<(usize, usize)>,
    /// (head, neck) part indices.
    pub head_pair: (usize, usize),
    pub edges: Vec<(usize, usize)>,
}

impl Skeleton {
    /// The 15-joint layout used by ITOP-style depth datasets.
    pub fn itop15() -> Self {
        let names = [
            "head",
            "neck",
            "r_shoulder",
            "l_shoulder",
            "r_elbow",
            "l_elbow",
            "r_hand",
            "l_hand",
            "torso",
            "r_hip",
            "l_hip",
            "r_knee",
            "l_knee",
            "r_foot",
            "l_foot",
        ];
        Self {
            k: names.len(),
            names: names.iter().map(|s| s.to_string()).collect(),
            flip_pairs: vec![(2, 3), (4, 5), (6, 7), (9, 10), (11, 12), (13, 14)],
            head_pair: (0, 1),
            edges: vec![
                (0, 1),
                (1, 2),
                (1, 3),
                (2, 4),
                (4, 6),
                (3, 5),
                (5, 7),
                (1, 8),
                (8, 9),
                (8, 10),
                (9, 11),
                (11, 13),
                (10, 12),
                (12, 14),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("skeleton: {msg}")));
        if self.k == 0 {
            return bad("part count must be positive".into());
        }
        if self.names.len() != self.k {
            return bad(format!("{} names for {} parts", self.names.len(), self.k));
        }
        let mut seen = vec![false; self.k];
        for &(l, r) in &self.flip_pairs {
            if l >= self.k || r >= self.k || l == r {
                return bad(format!("invalid flip pair ({l}, {r})"));
            }
            for i in [l, r] {
                if seen[i] {
                    return bad(format!("part {i} appears in more than one flip pair"));
                }
                seen[i] = true;
            }
        }
        let (h, n) = self.head_pair;
        if h >= self.k || n >= self.k {
            return bad(format!("head pair ({h}, {n}) out of range"));
        }
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= self.k || b >= self.k) {
            return bad(format!("edge ({a}, {b}) references a missing part"));
        }
        Ok(())
    }

    /// Index permutation applied by a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.k).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::itop15()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "camera intrinsics need positive focal lengths, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }
}

impl Default for CameraIntrinsics {
    /// A 224×224 depth sensor with roughly a 48° field of view.
    fn default() -> Self {
        Self {
            fx: 250.0,
            fy: 250.0,
            cx: 111.5,
            cy: 111.5,
        }
    }
}

/// Row-major depth raster in millimetres; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid depth value {v}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Depth in millimetres at integer pixel `(x, y)`.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, mm: f64) {
        debug_assert!(mm >= 0.0);
        self.data[y * self.width + x] = mm;
    }

    /// Depth at the pixel nearest to a continuous position, if in bounds.
    pub fn sample_nearest(&self, x: f64, y: f64) -> Option<f64> {
        let (u, v) = (x.round(), y.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some(self.get(u as usize, v as usize))
    }

    pub fn same_size(&self, other: &DepthImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// One keypoint: 2D pixel position, depth in metres and two flags.
///
/// `labeled` says whether ground truth exists for the part at all (truncated
/// parts have none). `visible` is false when the part is occluded; the global
/// pose map's visibility channel stores the complement of this flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub visible: bool,
    pub labeled: bool,
}

impl Part {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            visible: true,
            labeled: true,
        }
    }

    pub fn unlabeled() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            visible: false,
            labeled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub parts: Vec<Part>,
}

impl Pose {
    pub fn new(parts: Vec<Part>) -> Self {
        Self { parts }
    }

    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, &Part)> {
        self.parts.iter().enumerate().filter(|(_, p)| p.labeled)
    }

    pub fn labeled_count(&self) -> usize {
        self.parts.iter().filter(|p| p.labeled).count()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.parts.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "pose has {} parts, skeleton has {k}",
                self.parts.len()
            )));
        }
        if let Some(p) = self
            .parts
            .iter()
            .find(|p| p.labeled && (!(p.z >= 0.0) || !p.x.is_finite() || !p.y.is_finite()))
        {
            return Err(Error::InvalidConfig(format!(
                "labeled part with invalid coordinates ({}, {}, {})",
                p.x, p.y, p.z
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }
}

/// A decoded global pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub pose: Pose,
}

/// Tight box around the labeled 2D parts, grown by `margin × max(w, h)` on every side.
pub fn bbox_from_pose(pose: &Pose, margin: f64) -> Result<BBox> {
    let mut it = pose.labeled().map(|(_, p)| (p.x, p.y));
    let (x0, y0) = it.next().ok_or(Error::EmptyPose)?;
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (x0, y0, x0, y0);
    for (x, y) in it {
        x_min = x_min.min(x);
        y_min = y_min.min(y);
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    let pad = margin * (x_max - x_min).max(y_max - y_min);
    Ok(BBox::new(x_min - pad, y_min - pad, x_max + pad, y_max + pad))
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose_of(pts: &[(f64, f64)]) -> Pose {
        Pose::new(pts.iter().map(|&(x, y)| Part::new(x, y, 1.0)).collect())
    }

    #[test]
    fn bbox_single_point() {
        let b = bbox_from_pose(&pose_of(&[(10.0, 10.0)]), 0.0).unwrap();
        assert_eq!(b, BBox::new(10.0, 10.0, 10.0, 10.0));
    }

    #[test]
    fn bbox_extremes_and_margin() {
        let p = pose_of(&[(0.0, 0.0), (10.0, 20.0)]);
        assert_eq!(bbox_from_pose(&p, 0.0).unwrap(), BBox::new(0.0, 0.0, 10.0, 20.0));
        let b = bbox_from_pose(&p, 0.1).unwrap();
        for (got, want) in [
            (b.x_min, -2.0),
            (b.y_min, -2.0),
            (b.x_max, 12.0),
            (b.y_max, 22.0),
        ] {
            approx::assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn bbox_ignores_unlabeled_and_rejects_empty() {
        let mut p = pose_of(&[(0.0, 0.0), (50.0, 50.0)]);
        p.parts[1].labeled = false;
        assert_eq!(bbox_from_pose(&p, 0.0).unwrap(), BBox::new(0.0, 0.0, 0.0, 0.0));
        p.parts[0].labeled = false;
        assert!(matches!(bbox_from_pose(&p, 0.0), Err(Error::EmptyPose)));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        approx::assert_abs_diff_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-15);
        let p = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn default_skeleton_is_valid() {
        let s = Skeleton::default();
        s.validate().unwrap();
        assert_eq!(s.k, 15);
        let perm = s.flip_permutation();
        assert!(perm.iter().enumerate().all(|(i, &j)| perm[j] == i));
    }

    #[test]
    fn skeleton_validation_errors() {
        let mut s = Skeleton::default();
        s.flip_pairs.push((2, 20));
        assert!(s.validate().is_err());
        let mut s = Skeleton::default();
        s.flip_pairs.push((0, 2));
        assert!(s.validate().is_err());
        let mut s = Skeleton::default();
        s.edges.push((0, 15));
        assert!(s.validate().is_err());
        let mut s = Skeleton::default();
        s.names.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn camera_rejects_nonpositive_focal() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn depth_image_checks_length_and_sign() {
        assert!(DepthImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DepthImage::new(2, 1, vec![0.0, -1.0]).is_err());
        let d = DepthImage::new(2, 1, vec![0.0, 5.0]).unwrap();
        assert_eq!(d.sample_nearest(0.6, 0.2), Some(5.0));
        assert_eq!(d.sample_nearest(-0.6, 0.0), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 1e-9);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bbox_contains_labeled_parts(pts in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..20)) {
            let pose = pose_of(&pts);
            let b = bbox_from_pose(&pose, 0.0).unwrap();
            for (x, y) in pts {
                prop_assert!(b.contains(x, y));
            }
        }
    }
}
