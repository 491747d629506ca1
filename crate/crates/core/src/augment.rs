//! Geometric augmentation and depth compositing.
//!
//! Label coordinates put pixel centres on integers, so pixel `i` covers
//! `[i - 0.5, i + 0.5)`. Crop boxes use edge coordinates instead: an image of
//! width `w` spans `[0, w]` and the full-frame crop is `(0, 0, w, h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Mask;
use crate::types::{BBox, DepthImage, Part, Pose, Skeleton};

/// Default cap on the number of bodies pasted into one composite.
pub const MAX_BODIES: usize = 2;

/// A depth frame with one person's foreground mask and label.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSample {
    pub depth: DepthImage,
    pub mask: Mask,
    pub pose: Pose,
}

impl SegmentedSample {
    pub fn new(depth: DepthImage, mask: Mask, pose: Pose) -> Result<Self> {
        if mask.width != depth.width() || mask.height != depth.height() {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, depth is {}x{}",
                mask.width,
                mask.height,
                depth.width(),
                depth.height()
            )));
        }
        Ok(Self { depth, mask, pose })
    }
}

fn mirror_pose(pose: &Pose, width: usize, perm: &[usize]) -> Pose {
    let w1 = width as f64 - 1.0;
    let mut parts = pose.parts.clone();
    for (j, p) in pose.parts.iter().enumerate() {
        let mut q = *p;
        if q.labeled {
            q.x = w1 - q.x;
        }
        parts[perm[j]] = q;
    }
    Pose::new(parts)
}

fn mirror_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Horizontal mirror. Labels map `x → (w-1) - x` and left/right parts swap
/// slots. With the principal point at the image centre this negates the
/// camera-frame `X` of every label.
///
/// Applying it twice restores labels bit for bit whenever they carry a fixed
/// binary sub-pixel precision (e.g. 1/1024 px), since the subtractions are
/// then exact.
pub fn hflip(img: &DepthImage, poses: &[Pose], skeleton: &Skeleton) -> (DepthImage, Vec<Pose>) {
    let perm = skeleton.flip_permutation();
    let data = mirror_rows(img.data(), img.width());
    let out = DepthImage::new(img.width(), img.height(), data).expect("same size");
    let poses = poses
        .iter()
        .map(|p| mirror_pose(p, img.width(), &perm))
        .collect();
    (out, poses)
}

pub fn hflip_mask(mask: &Mask) -> Mask {
    Mask {
        width: mask.width,
        height: mask.height,
        data: mirror_rows(&mask.data, mask.width),
    }
}

pub fn hflip_sample(s: &SegmentedSample, skeleton: &Skeleton) -> SegmentedSample {
    let (depth, mut poses) = hflip(&s.depth, std::slice::from_ref(&s.pose), skeleton);
    SegmentedSample {
        depth,
        mask: hflip_mask(&s.mask),
        pose: poses.remove(0),
    }
}

/// Rotation about the image centre followed by a crop and resize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotateCrop {
    /// Degrees; positive turns the content clockwise on screen
    /// (`(x, y) → (y, w-1-x)` at 90° for a square image).
    pub angle: f64,
    /// Crop in edge coordinates of the rotated frame.
    pub crop: BBox,
    pub out_width: usize,
    pub out_height: usize,
}

/// Exact values at multiples of 90° so quarter turns are lossless.
fn cos_sin(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let t = deg.to_radians();
        (t.cos(), t.sin())
    }
}

struct Affine {
    c: (f64, f64),
    cos: f64,
    sin: f64,
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl Affine {
    fn new(w: usize, h: usize, rc: &RotateCrop) -> Result<Self> {
        let (cw, ch) = (rc.crop.width(), rc.crop.height());
        if !(cw > 0.0 && ch > 0.0) || rc.out_width == 0 || rc.out_height == 0 {
            return Err(Error::DegenerateCrop(format!(
                "crop {cw}x{ch} to {}x{}",
                rc.out_width, rc.out_height
            )));
        }
        let (cos, sin) = cos_sin(rc.angle);
        Ok(Self {
            c: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            cos,
            sin,
            x0: rc.crop.x_min,
            y0: rc.crop.y_min,
            sx: rc.out_width as f64 / cw,
            sy: rc.out_height as f64 / ch,
        })
    }

    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.c.0, y - self.c.1);
        let xr = self.c.0 + self.cos * dx + self.sin * dy;
        let yr = self.c.1 - self.sin * dx + self.cos * dy;
        (
            (xr + 0.5 - self.x0) * self.sx - 0.5,
            (yr + 0.5 - self.y0) * self.sy - 0.5,
        )
    }

    fn inverse(&self, xo: f64, yo: f64) -> (f64, f64) {
        let xr = self.x0 + (xo + 0.5) / self.sx - 0.5;
        let yr = self.y0 + (yo + 0.5) / self.sy - 0.5;
        let (dx, dy) = (xr - self.c.0, yr - self.c.1);
        (
            self.c.0 + self.cos * dx - self.sin * dy,
            self.c.1 + self.sin * dx + self.cos * dy,
        )
    }
}

fn warp<T: Copy>(src: &[T], w: usize, h: usize, fill: T, rc: &RotateCrop, af: &Affine) -> Vec<T> {
    let mut out = vec![fill; rc.out_width * rc.out_height];
    for yo in 0..rc.out_height {
        for xo in 0..rc.out_width {
            let (x, y) = af.inverse(xo as f64, yo as f64);
            let (xs, ys) = (x.round(), y.round());
            if xs >= 0.0 && ys >= 0.0 && xs < w as f64 && ys < h as f64 {
                out[yo * rc.out_width + xo] = src[ys as usize * w + xs as usize];
            }
        }
    }
    out
}

fn warp_pose(pose: &Pose, af: &Affine, rc: &RotateCrop) -> Pose {
    let parts = pose
        .parts
        .iter()
        .map(|p| {
            if !p.labeled {
                return *p;
            }
            let (x, y) = af.forward(p.x, p.y);
            let inside = x >= -0.5
                && y >= -0.5
                && x < rc.out_width as f64 - 0.5
                && y < rc.out_height as f64 - 0.5;
            if inside {
                Part { x, y, ..*p }
            } else {
                Part::unlabeled()
            }
        })
        .collect();
    Pose::new(parts)
}

/// Rotates, crops and resizes with nearest-neighbour sampling (uncovered
/// pixels become 0). Depth values are not changed; labels follow the same
/// map and become unlabeled when they leave the frame.
pub fn rotate_crop(img: &DepthImage, poses: &[Pose], rc: &RotateCrop) -> Result<(DepthImage, Vec<Pose>)> {
    let af = Affine::new(img.width(), img.height(), rc)?;
    let data = warp(img.data(), img.width(), img.height(), 0.0, rc, &af);
    let out = DepthImage::new(rc.out_width, rc.out_height, data)?;
    Ok((out, poses.iter().map(|p| warp_pose(p, &af, rc)).collect()))
}

pub fn rotate_crop_sample(s: &SegmentedSample, rc: &RotateCrop) -> Result<SegmentedSample> {
    let af = Affine::new(s.depth.width(), s.depth.height(), rc)?;
    let (w, h) = (s.depth.width(), s.depth.height());
    let depth = DepthImage::new(rc.out_width, rc.out_height, warp(s.depth.data(), w, h, 0.0, rc, &af))?;
    let mask = Mask::new(rc.out_width, rc.out_height, warp(&s.mask.data, w, h, false, rc, &af))?;
    SegmentedSample::new(depth, mask, warp_pose(&s.pose, &af, rc))
}

fn check_size(a: &DepthImage, w: usize, h: usize, what: &str) -> Result<()> {
    if a.width() != w || a.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, expected {w}x{h}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Pastes the masked foreground over `bg` regardless of depth.
pub fn composite_background(fg: &SegmentedSample, bg: &DepthImage) -> Result<(DepthImage, Pose)> {
    check_size(bg, fg.depth.width(), fg.depth.height(), "background")?;
    let data = fg
        .mask
        .data
        .iter()
        .zip(fg.depth.data().iter().zip(bg.data()))
        .map(|(&m, (&f, &b))| if m { f } else { b })
        .collect();
    Ok((DepthImage::new(bg.width(), bg.height(), data)?, fg.pose.clone()))
}

#[inline]
fn as_far(mm: f64) -> f64 {
    if mm > 0.0 {
        mm
    } else {
        f64::INFINITY
    }
}

/// z-buffer composite of several people over a background.
///
/// Every pixel takes the nearest valid depth among the background and the
/// masked sample pixels (0 counts as infinitely far). A labeled part becomes
/// occluded when its own surface depth (the sample's masked depth at its
/// pixel, else the joint depth) lies more than `tol` metres behind the
/// composite. Parts already occluded stay occluded.
pub fn composite_multiperson(
    samples: &[SegmentedSample],
    bg: &DepthImage,
    tol: f64,
    max_bodies: usize,
) -> Result<(DepthImage, Vec<Pose>)> {
    if samples.len() > max_bodies {
        return Err(Error::TooManyBodies {
            count: samples.len(),
            cap: max_bodies,
        });
    }
    let (w, h) = (bg.width(), bg.height());
    for s in samples {
        check_size(&s.depth, w, h, "sample depth")?;
        if s.mask.width != w || s.mask.height != h {
            return Err(Error::DimensionMismatch(format!(
                "sample mask is {}x{}, expected {w}x{h}",
                s.mask.width, s.mask.height
            )));
        }
    }
    let mut zbuf: Vec<f64> = bg.data().iter().map(|&b| as_far(b)).collect();
    for s in samples {
        for (i, z) in zbuf.iter_mut().enumerate() {
            if s.mask.data[i] {
                *z = z.min(as_far(s.depth.data()[i]));
            }
        }
    }
    let out: Vec<f64> = zbuf.iter().map(|&z| if z.is_finite() { z } else { 0.0 }).collect();
    let tol_mm = tol * 1000.0;
    let poses = samples
        .iter()
        .map(|s| {
            let mut pose = s.pose.clone();
            for p in pose.parts.iter_mut().filter(|p| p.labeled && p.visible) {
                let (xs, ys) = (p.x.round(), p.y.round());
                if xs < 0.0 || ys < 0.0 || xs >= w as f64 || ys >= h as f64 {
                    continue;
                }
                let i = ys as usize * w + xs as usize;
                let own = if s.mask.data[i] && s.depth.data()[i] > 0.0 {
                    s.depth.data()[i]
                } else {
                    p.z * 1000.0
                };
                if own - zbuf[i] > tol_mm {
                    p.visible = false;
                }
            }
            pose
        })
        .collect();
    Ok((DepthImage::new(w, h, out)?, poses))
}
