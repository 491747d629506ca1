//! Pose-over-parts machinery for multi-person 3D pose estimation from depth images.
//!
//! The crate covers everything around the network except the network itself:
//!
//! 1. **types**: skeleton, camera, depth raster, poses, boxes and detections.
//! 2. **geometry**: pinhole projection and principal-axis depth rescaling.
//! 3. **encoder**: ground-truth part maps (heatmaps, part depth, truncated
//!    part displacement fields) and the anchor-based global pose map.
//! 4. **decoder**: NMS over the global pose map, displacement-guided fusion
//!    and the three-way conflict resolver.
//! 5. **loss**: multi-stage weighted L2 objective with analytic gradients.
//! 6. **augment**: flips, rotation/cropping, background and z-buffer
//!    multi-person compositing.
//! 7. **metrics**: PCK and MPII-style mAP in 2D and 3D.
//! 8. **synth**: capsule-figure depth renderer and an oracle predictor that
//!    stands in for a trained network.
//! 9. **pipeline**: the seeded scene → maps → oracle → decode → metrics loop.

pub mod augment;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    bbox_from_pose, iou, BBox, CameraIntrinsics, DepthImage, Detection, Part, Pose, Skeleton,
};
