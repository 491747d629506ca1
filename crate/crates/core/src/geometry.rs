//! Pinhole projection and principal-axis depth rescaling.
//!
//! Depth rescaling simulates sliding the camera along its optical axis. For a
//! scale `a`, a point at depth `Z0` imaged at `x0` moves to depth `Z1 = a·Z0`
//! and is imaged at `x1 = cx + (x0 - cx) / a`; its lateral position `X, Y`
//! does not change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraIntrinsics, DepthImage, Pose};

/// Camera-frame point in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }
}

pub fn project(p: &Point3, cam: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((cam.cx + cam.fx * p.x / p.z, cam.cy + cam.fy * p.y / p.z))
}

pub fn backproject(x: f64, y: f64, z: f64, cam: &CameraIntrinsics) -> Result<Point3> {
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok(Point3::new(
        (x - cam.cx) * z / cam.fx,
        (y - cam.cy) * z / cam.fy,
        z,
    ))
}

/// Re-renders `img` and its labels as if the camera had moved so that every
/// depth is multiplied by `a`.
///
/// The raster is built by inverse warping with nearest-neighbour lookup;
/// sources outside the frame or invalid map to 0.
pub fn depth_rescale(
    img: &DepthImage,
    poses: &[Pose],
    cam: &CameraIntrinsics,
    a: f64,
) -> Result<(DepthImage, Vec<Pose>)> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidScale(a));
    }
    if a == 1.0 {
        return Ok((img.clone(), poses.to_vec()));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = DepthImage::zeros(w, h);
    for y1 in 0..h {
        let y0 = (cam.cy + a * (y1 as f64 - cam.cy)).round();
        if y0 < 0.0 || y0 >= h as f64 {
            continue;
        }
        for x1 in 0..w {
            let x0 = (cam.cx + a * (x1 as f64 - cam.cx)).round();
            if x0 < 0.0 || x0 >= w as f64 {
                continue;
            }
            let src = img.get(x0 as usize, y0 as usize);
            if src > 0.0 {
                out.set(x1, y1, a * src);
            }
        }
    }
    let poses = poses
        .iter()
        .map(|pose| rescale_pose(pose, cam, a))
        .collect();
    Ok((out, poses))
}

/// Label half of [`depth_rescale`].
pub fn rescale_pose(pose: &Pose, cam: &CameraIntrinsics, a: f64) -> Pose {
    let mut out = pose.clone();
    for p in out.parts.iter_mut().filter(|p| p.labeled) {
        p.x = cam.cx + (p.x - cam.cx) / a;
        p.y = cam.cy + (p.y - cam.cy) / a;
        p.z *= a;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Part;
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 112.0, 112.0).unwrap()
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let c = CameraIntrinsics::new(321.0, 123.0, 40.5, 77.25).unwrap();
        assert_eq!(project(&Point3::new(0.0, 0.0, 1.0), &c).unwrap(), (40.5, 77.25));
    }

    #[test]
    fn project_example() {
        assert_eq!(
            project(&Point3::new(0.5, 0.0, 1.0), &cam()).unwrap(),
            (362.0, 112.0)
        );
    }

    #[test]
    fn backproject_examples() {
        let c = cam();
        assert_eq!(
            backproject(112.0, 112.0, 2.0, &c).unwrap(),
            Point3::new(0.0, 0.0, 2.0)
        );
        assert_eq!(
            backproject(362.0, 112.0, 1.0, &c).unwrap(),
            Point3::new(0.5, 0.0, 1.0)
        );
    }

    #[test]
    fn behind_camera_errors() {
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, 0.0), &cam()),
            Err(Error::BehindCamera(_))
        ));
        assert!(backproject(1.0, 1.0, -1.0, &cam()).is_err());
    }

    #[test]
    fn rescale_identity_is_exact() {
        let img = DepthImage::new(3, 2, vec![1000.0, 0.0, 1500.0, 2000.0, 2500.0, 3000.0]).unwrap();
        let poses = vec![Pose::new(vec![Part::new(0.1234, 1.5, 2.25)])];
        let (out, p) = depth_rescale(&img, &poses, &cam(), 1.0).unwrap();
        assert_eq!(out, img);
        assert_eq!(p, poses);
    }

    #[test]
    fn rescale_label_example() {
        let c = cam();
        let poses = vec![Pose::new(vec![Part::new(c.cx + 100.0, c.cy, 2.0)])];
        let (_, p) = depth_rescale(&DepthImage::zeros(4, 4), &poses, &c, 2.0).unwrap();
        let part = p[0].parts[0];
        assert_eq!((part.x, part.y, part.z), (c.cx + 50.0, c.cy, 4.0));
    }

    #[test]
    fn rescale_rejects_nonpositive_scale() {
        let img = DepthImage::zeros(2, 2);
        assert!(matches!(
            depth_rescale(&img, &[], &cam(), 0.0),
            Err(Error::InvalidScale(_))
        ));
        assert!(depth_rescale(&img, &[], &cam(), -1.0).is_err());
    }

    #[test]
    fn rescale_raster_scales_depth_and_zooms() {
        // a > 1 pushes the scene away: the image content shrinks toward the
        // principal point and every surviving value is a times a source value.
        let c = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let data: Vec<f64> = (0..81).map(|i| 1000.0 + i as f64).collect();
        let img = DepthImage::new(9, 9, data).unwrap();
        let (out, _) = depth_rescale(&img, &[], &c, 2.0).unwrap();
        assert_eq!(out.get(4, 4), 2.0 * img.get(4, 4));
        assert_eq!(out.get(5, 4), 2.0 * img.get(6, 4));
        assert_eq!(out.get(0, 0), 0.0);
        for &v in out.data() {
            assert!(v == 0.0 || img.data().iter().any(|&s| 2.0 * s == v));
        }
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            x in -200.0..400.0f64, y in -200.0..400.0f64, z in 0.2..10.0f64,
            fx in 100.0..900.0f64, fy in 100.0..900.0f64,
        ) {
            let c = CameraIntrinsics::new(fx, fy, 111.5, 95.25).unwrap();
            let p = backproject(x, y, z, &c).unwrap();
            let (u, v) = project(&p, &c).unwrap();
            prop_assert!((u - x).abs() <= 1e-9 && (v - y).abs() <= 1e-9);
            let q = backproject(u, v, p.z, &c).unwrap();
            prop_assert!(q.distance(&p) <= 1e-9);
        }

        #[test]
        fn rescale_labels_invert_and_stay_projective(
            x in 0.0..224.0f64, y in 0.0..224.0f64, z in 0.5..6.0f64, a in 0.5..2.5f64,
        ) {
            let c = CameraIntrinsics::default();
            let pose = Pose::new(vec![Part::new(x, y, z)]);
            let fwd = rescale_pose(&pose, &c, a);
            let back = rescale_pose(&fwd, &c, 1.0 / a);
            let (p0, p2) = (pose.parts[0], back.parts[0]);
            prop_assert!((p0.x - p2.x).abs() < 1e-6 && (p0.y - p2.y).abs() < 1e-6 && (p0.z - p2.z).abs() < 1e-6);
            // lateral position is preserved, so projecting it at the new depth
            // must land on the new label
            let orig3d = backproject(x, y, z, &c).unwrap();
            let p1 = fwd.parts[0];
            let (u, v) = project(&Point3::new(orig3d.x, orig3d.y, p1.z), &c).unwrap();
            prop_assert!((u - p1.x).abs() < 1e-6 && (v - p1.y).abs() < 1e-6);
        }
    }

    #[test]
    fn rescale_values_are_exact_multiples() {
        let c = CameraIntrinsics::default();
        let mut seed = 7u64;
        let data: Vec<f64> = (0..224 * 224)
            .map(|_| {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if (seed >> 60) == 0 { 0.0 } else { ((seed >> 33) % 6000 + 500) as f64 }
            })
            .collect();
        let img = DepthImage::new(224, 224, data).unwrap();
        for a in [1.3, 1.7] {
            let (out, _) = depth_rescale(&img, &[], &c, a).unwrap();
            for y1 in 0..224 {
                for x1 in 0..224 {
                    let v = out.get(x1, y1);
                    if v == 0.0 {
                        continue;
                    }
                    let x0 = (c.cx + a * (x1 as f64 - c.cx)).round() as usize;
                    let y0 = (c.cy + a * (y1 as f64 - c.cy)).round() as usize;
                    assert_eq!(v, a * img.get(x0, y0));
                }
            }
        }
    }
}
