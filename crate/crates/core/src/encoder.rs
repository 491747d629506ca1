//! Ground-truth map generation.
//!
//! Part maps live on the stride-8 grid: `K+1` confidence maps, `K` part depth
//! maps and `2K` truncated part displacement fields (TPDF), each with its
//! weight map. The global pose map lives on the stride-16 grid and stores, for
//! every anchor of every cell, five box attributes followed by
//! `(dx, dy, z, v)` for each part.
//!
//! Grid coordinates are pixel coordinates divided by the stride, so cell
//! `(u, v)` sits at pixel `(u·stride, v·stride)`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorEntry;
use crate::types::{bbox_from_pose, iou, BBox, DepthImage, Pose};

pub const PART_STRIDE: usize = 8;
pub const GLOBAL_STRIDE: usize = 16;

/// Channels of one anchor slot in the global pose map.
pub const CH_TX: usize = 0;
pub const CH_TY: usize = 1;
pub const CH_TW: usize = 2;
pub const CH_TH: usize = 3;
pub const CH_OBJ: usize = 4;
pub const BOX_CHANNELS: usize = 5;
pub const PART_CHANNELS: usize = 4;

/// Offsets of the per-part fields within a part's channel group.
pub const PART_DX: usize = 0;
pub const PART_DY: usize = 1;
pub const PART_Z: usize = 2;
pub const PART_V: usize = 3;

#[inline]
pub fn part_channel(j: usize, field: usize) -> usize {
    BOX_CHANNELS + PART_CHANNELS * j + field
}

pub fn pose_channels(k: usize) -> usize {
    BOX_CHANNELS + PART_CHANNELS * k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub stride: usize,
    pub gw: usize,
    pub gh: usize,
}

impl GridSpec {
    pub fn for_image(width: usize, height: usize, stride: usize) -> Result<Self> {
        if stride != PART_STRIDE && stride != GLOBAL_STRIDE {
            return Err(Error::InvalidConfig(format!(
                "grid stride must be {PART_STRIDE} or {GLOBAL_STRIDE}, got {stride}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("image has zero area".into()));
        }
        Ok(Self {
            stride,
            gw: width.div_ceil(stride),
            gh: height.div_ceil(stride),
        })
    }

    #[inline]
    pub fn to_grid(&self, px: f64) -> f64 {
        px / self.stride as f64
    }

    #[inline]
    pub fn to_pixels(&self, g: f64) -> f64 {
        g * self.stride as f64
    }

    /// Nearest cell to a continuous grid position, if it lies on the grid.
    pub fn nearest_cell(&self, gx: f64, gy: f64) -> Option<(usize, usize)> {
        let (u, v) = (gx.round(), gy.round());
        if u < 0.0 || v < 0.0 || u >= self.gw as f64 || v >= self.gh as f64 {
            None
        } else {
            Some((u as usize, v as usize))
        }
    }

    /// Nearest cell, clamped into the grid.
    pub fn clamped_cell(&self, gx: f64, gy: f64) -> (usize, usize) {
        let clamp = |g: f64, n: usize| {
            if g.is_nan() {
                0
            } else {
                g.round().clamp(0.0, (n - 1) as f64) as usize
            }
        };
        (clamp(gx, self.gw), clamp(gy, self.gh))
    }
}

/// Encoding parameters. Distances are in stride-8 grid units; anchors in
/// stride-16 grid units as `(width, height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Standard deviation of the peak-1 heatmap Gaussian.
    pub sigma: f64,
    /// Radius of the disk written with the part's depth.
    pub disk_radius: f64,
    /// TPDF truncation radius; `inf` disables truncation.
    #[serde(with = "radius_serde")]
    pub radius: f64,
    pub anchors: Vec<(f64, f64)>,
    pub fg_weight: f64,
    pub bg_weight: f64,
    /// Depth tolerance (metres) used to derive the visibility channel.
    pub vis_tol: f64,
    /// Relative margin applied when deriving a pose's box.
    pub bbox_margin: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            disk_radius: 2.0,
            radius: 2.0,
            anchors: vec![(6.0, 12.0), (3.0, 6.0)],
            fg_weight: 0.9,
            bg_weight: 0.1,
            vis_tol: 0.025,
            bbox_margin: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.radius >= 1.0) {
            return bad("truncation radius must be at least 1");
        }
        if !(self.disk_radius >= 0.0) || !self.disk_radius.is_finite() {
            return bad("disk radius must be finite and non-negative");
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return bad("anchors must be a nonempty list of positive sizes");
        }
        if !(self.vis_tol >= 0.0) || !(self.bbox_margin >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }
}

pub(crate) mod radius_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*r)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("invalid radius `{t}`"))),
        }
    }
}

/// Per-part rasters on the stride-8 grid. Shapes: `heat` is `(K+1, gh, gw)`,
/// the rest `(K, gh, gw)`. Depth is in metres, displacements in grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMaps {
    pub heat: Array3<f64>,
    pub depth: Array3<f64>,
    pub disp_x: Array3<f64>,
    pub disp_y: Array3<f64>,
}

impl PartMaps {
    pub fn zeros(k: usize, grid: &GridSpec) -> Self {
        let shape = (k, grid.gh, grid.gw);
        Self {
            heat: Array3::zeros((k + 1, grid.gh, grid.gw)),
            depth: Array3::zeros(shape),
            disp_x: Array3::zeros(shape),
            disp_y: Array3::zeros(shape),
        }
    }

    pub fn k(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn grid(&self) -> GridSpec {
        let s = self.depth.shape();
        GridSpec {
            stride: PART_STRIDE,
            gw: s[2],
            gh: s[1],
        }
    }
}

/// Anchor-based global pose map, shape `(A, 5 + 4K, gh, gw)` on the stride-16 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPoseMap {
    pub values: Array4<f64>,
}

impl GlobalPoseMap {
    pub fn zeros(anchors: usize, k: usize, grid: &GridSpec) -> Self {
        Self {
            values: Array4::zeros((anchors, pose_channels(k), grid.gh, grid.gw)),
        }
    }

    pub fn anchors(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn k(&self) -> usize {
        (self.values.shape()[1] - BOX_CHANNELS) / PART_CHANNELS
    }

    pub fn grid(&self) -> GridSpec {
        let s = self.values.shape();
        GridSpec {
            stride: GLOBAL_STRIDE,
            gw: s[3],
            gh: s[2],
        }
    }
}

/// Weight maps paired with the ground-truth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapWeights {
    pub depth: Array3<f64>,
    /// Shared by the x and y displacement maps.
    pub disp: Array3<f64>,
    pub pose: Array4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMaps {
    pub parts: PartMaps,
    pub global: GlobalPoseMap,
    pub weights: MapWeights,
    /// Ground-truth poses dropped because another pose claimed the same anchor slot.
    pub collisions: usize,
}

/// Labeled instances of part `j` in grid coordinates, in pose order.
fn instances(poses: &[Pose], j: usize, grid: &GridSpec) -> Vec<(f64, f64, f64)> {
    poses
        .iter()
        .filter_map(|p| p.parts.get(j))
        .filter(|p| p.labeled)
        .map(|p| (grid.to_grid(p.x), grid.to_grid(p.y), p.z))
        .collect()
}

/// Cell index range within `radius` of `c`, clipped to `[0, n)`.
fn cell_span(c: f64, radius: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (c - radius).ceil().max(0.0);
    let hi = (c + radius).floor() + 1.0;
    let hi = hi.min(n as f64);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

/// Peak-1 Gaussian confidence maps combined across instances by max; the
/// last channel is the background, `1 - max_j H_j`.
pub fn encode_heatmaps(poses: &[Pose], k: usize, grid: &GridSpec, cfg: &EncoderConfig) -> Array3<f64> {
    let mut heat = Array3::<f64>::zeros((k + 1, grid.gh, grid.gw));
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    for j in 0..k {
        for (qx, qy, _) in instances(poses, j, grid) {
            for v in 0..grid.gh {
                for u in 0..grid.gw {
                    let d2 = (u as f64 - qx).powi(2) + (v as f64 - qy).powi(2);
                    let h = (-d2 / denom).exp();
                    let cell = &mut heat[[j, v, u]];
                    if h > *cell {
                        *cell = h;
                    }
                }
            }
        }
    }
    for v in 0..grid.gh {
        for u in 0..grid.gw {
            let m = (0..k).map(|j| heat[[j, v, u]]).fold(0.0, f64::max);
            heat[[k, v, u]] = 1.0 - m;
        }
    }
    heat
}

/// Part depth maps initialised from the downsampled raw depth, with a disk
/// around every instance overwritten by the instance depth (nearest wins).
pub fn encode_part_depth(
    poses: &[Pose],
    k: usize,
    raw: &DepthImage,
    grid: &GridSpec,
    cfg: &EncoderConfig,
) -> (Array3<f64>, Array3<f64>) {
    let mut base = ndarray::Array2::<f64>::zeros((grid.gh, grid.gw));
    for v in 0..grid.gh {
        let y = (v * grid.stride).min(raw.height() - 1);
        for u in 0..grid.gw {
            let x = (u * grid.stride).min(raw.width() - 1);
            base[[v, u]] = raw.get(x, y) / 1000.0;
        }
    }
    let mut depth = Array3::<f64>::zeros((k, grid.gh, grid.gw));
    let mut weight = Array3::<f64>::from_elem((k, grid.gh, grid.gw), cfg.bg_weight);
    let r2 = cfg.disk_radius * cfg.disk_radius;
    let mut written = ndarray::Array2::<bool>::from_elem((grid.gh, grid.gw), false);
    for j in 0..k {
        depth.index_axis_mut(ndarray::Axis(0), j).assign(&base);
        written.fill(false);
        for (qx, qy, z) in instances(poses, j, grid) {
            for v in cell_span(qy, cfg.disk_radius, grid.gh) {
                for u in cell_span(qx, cfg.disk_radius, grid.gw) {
                    let d2 = (u as f64 - qx).powi(2) + (v as f64 - qy).powi(2);
                    if d2 > r2 {
                        continue;
                    }
                    if !written[[v, u]] || z < depth[[j, v, u]] {
                        depth[[j, v, u]] = z;
                    }
                    written[[v, u]] = true;
                    weight[[j, v, u]] = cfg.fg_weight;
                }
            }
        }
    }
    (depth, weight)
}

/// Truncated part displacement fields.
///
/// Each cell within `radius` of at least one instance of part `j` stores the
/// vector to the nearest such instance (ties go to the lowest instance
/// index) and gets weight 1; every other cell is zero with weight 0.
pub fn encode_tpdf(
    poses: &[Pose],
    k: usize,
    grid: &GridSpec,
    cfg: &EncoderConfig,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let shape = (k, grid.gh, grid.gw);
    let mut dx = Array3::<f64>::zeros(shape);
    let mut dy = Array3::<f64>::zeros(shape);
    let mut wt = Array3::<f64>::zeros(shape);
    let mut best = ndarray::Array2::<f64>::zeros((grid.gh, grid.gw));
    let r2 = cfg.radius * cfg.radius;
    for j in 0..k {
        best.fill(f64::INFINITY);
        for (qx, qy, _) in instances(poses, j, grid) {
            let (vs, us) = if cfg.radius.is_finite() {
                (
                    cell_span(qy, cfg.radius, grid.gh),
                    cell_span(qx, cfg.radius, grid.gw),
                )
            } else {
                (0..grid.gh, 0..grid.gw)
            };
            for v in vs {
                for u in us.clone() {
                    let (ex, ey) = (qx - u as f64, qy - v as f64);
                    let d2 = ex * ex + ey * ey;
                    if d2 <= r2 && d2 < best[[v, u]] {
                        best[[v, u]] = d2;
                        dx[[j, v, u]] = ex;
                        dy[[j, v, u]] = ey;
                        wt[[j, v, u]] = 1.0;
                    }
                }
            }
        }
    }
    (dx, dy, wt)
}

/// Occlusion flags (the `v` channel): set when a part's depth disagrees with
/// the z-buffered part depth map at its cell by more than `tol`. Unlabeled
/// and off-grid parts are flagged too.
pub fn assign_visibility(pose: &Pose, depth: &Array3<f64>, grid: &GridSpec, tol: f64) -> Vec<bool> {
    pose.parts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if !p.labeled {
                return true;
            }
            match grid.nearest_cell(grid.to_grid(p.x), grid.to_grid(p.y)) {
                Some((u, v)) => (p.z - depth[[j, v, u]]).abs() > tol,
                None => true,
            }
        })
        .collect()
}

/// Global pose map plus weights, from poses and their occlusion flags.
///
/// Each pose binds to the stride-16 cell holding its box centre and to the
/// anchor whose box (centred on that cell) has the highest IOU with it. When
/// two poses claim the same slot the one with the larger box wins.
pub fn encode_global_pose_map(
    poses: &[Pose],
    occlusion: &[Vec<bool>],
    k: usize,
    grid: &GridSpec,
    cfg: &EncoderConfig,
) -> (GlobalPoseMap, Array4<f64>, usize) {
    let a_count = cfg.anchors.len();
    let mut map = GlobalPoseMap::zeros(a_count, k, grid);
    let mut weight = Array4::<f64>::zeros(map.values.raw_dim());
    weight
        .slice_mut(ndarray::s![.., CH_OBJ, .., ..])
        .fill(cfg.bg_weight);

    // slot -> (pose index, box area)
    let mut slots: Vec<Option<(usize, BBox)>> = vec![None; a_count * grid.gh * grid.gw];
    let mut collisions = 0;
    let stride = grid.stride as f64;
    let min_side = 1.0 / stride;
    for (i, pose) in poses.iter().enumerate() {
        let Ok(px_box) = bbox_from_pose(pose, cfg.bbox_margin) else {
            continue;
        };
        let gbox = px_box.scaled(1.0 / stride);
        let (cx, cy) = gbox.center();
        let (cu, cv) = (cx.floor(), cy.floor());
        if cu < 0.0 || cv < 0.0 || cu >= grid.gw as f64 || cv >= grid.gh as f64 {
            continue;
        }
        let (cu, cv) = (cu as usize, cv as usize);
        let sized = BBox::from_center(cx, cy, gbox.width().max(min_side), gbox.height().max(min_side));
        let anchor = best_anchor(&sized, cu, cv, &cfg.anchors);
        let slot = (anchor * grid.gh + cv) * grid.gw + cu;
        match slots[slot] {
            Some((_, prev)) => {
                collisions += 1;
                if sized.area() > prev.area() {
                    slots[slot] = Some((i, sized));
                }
            }
            None => slots[slot] = Some((i, sized)),
        }
    }

    for (slot, entry) in slots.iter().enumerate() {
        let Some((i, gbox)) = entry else { continue };
        let a = slot / (grid.gh * grid.gw);
        let cv = (slot / grid.gw) % grid.gh;
        let cu = slot % grid.gw;
        let (aw, ah) = cfg.anchors[a];
        let (cx, cy) = gbox.center();
        let mut cell = map.values.slice_mut(ndarray::s![a, .., cv, cu]);
        cell[CH_TX] = cx - cu as f64;
        cell[CH_TY] = cy - cv as f64;
        cell[CH_TW] = (gbox.width() / aw).ln();
        cell[CH_TH] = (gbox.height() / ah).ln();
        cell[CH_OBJ] = 1.0;
        let (ox, oy) = (cu as f64 + 0.5, cv as f64 + 0.5);
        let mut w = weight.slice_mut(ndarray::s![a, .., cv, cu]);
        w.fill(1.0);
        w[CH_OBJ] = cfg.fg_weight;
        for (j, p) in poses[*i].parts.iter().enumerate() {
            let occluded = occlusion.get(*i).and_then(|o| o.get(j)).copied().unwrap_or(true);
            cell[part_channel(j, PART_V)] = if occluded || !p.labeled { 1.0 } else { 0.0 };
            if p.labeled {
                cell[part_channel(j, PART_DX)] = p.x / stride - ox;
                cell[part_channel(j, PART_DY)] = p.y / stride - oy;
                cell[part_channel(j, PART_Z)] = p.z;
            } else {
                for f in [PART_DX, PART_DY, PART_Z] {
                    w[part_channel(j, f)] = 0.0;
                }
            }
        }
    }
    (map, weight, collisions)
}

fn best_anchor(gbox: &BBox, cu: usize, cv: usize, anchors: &[(f64, f64)]) -> usize {
    let (ox, oy) = (cu as f64 + 0.5, cv as f64 + 0.5);
    let mut best = (0, f64::NEG_INFINITY);
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let score = iou(gbox, &BBox::from_center(ox, oy, aw, ah));
        if score > best.1 {
            best = (a, score);
        }
    }
    best.0
}

/// Full ground truth for one image.
pub fn encode(poses: &[Pose], k: usize, raw: &DepthImage, cfg: &EncoderConfig) -> Result<EncodedMaps> {
    cfg.validate()?;
    for p in poses {
        p.validate(k)?;
    }
    let grid8 = GridSpec::for_image(raw.width(), raw.height(), PART_STRIDE)?;
    let grid16 = GridSpec::for_image(raw.width(), raw.height(), GLOBAL_STRIDE)?;
    let heat = encode_heatmaps(poses, k, &grid8, cfg);
    let (depth, wd) = encode_part_depth(poses, k, raw, &grid8, cfg);
    let (disp_x, disp_y, wt) = encode_tpdf(poses, k, &grid8, cfg);
    let occlusion: Vec<Vec<bool>> = poses
        .iter()
        .map(|p| {
            let mut occ = assign_visibility(p, &depth, &grid8, cfg.vis_tol);
            // occlusion already known from the image (compositing, rendering)
            for (o, part) in occ.iter_mut().zip(&p.parts) {
                *o |= !part.visible;
            }
            occ
        })
        .collect();
    let (global, wp, collisions) = encode_global_pose_map(poses, &occlusion, k, &grid16, cfg);
    Ok(EncodedMaps {
        parts: PartMaps {
            heat,
            depth,
            disp_x,
            disp_y,
        },
        global,
        weights: MapWeights {
            depth: wd,
            disp: wt,
            pose: wp,
        },
        collisions,
    })
}

// ---------------------------------------------------------------------------
// tensor container bridge
// ---------------------------------------------------------------------------

fn entry<D: ndarray::Dimension>(name: &str, a: &ndarray::Array<f64, D>) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        dims: a.shape().to_vec(),
        data: a.iter().map(|&v| v as f32).collect(),
    }
}

fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("tensor file has no `{name}` entry")))
}

fn array3(entries: &[TensorEntry], name: &str) -> Result<Array3<f64>> {
    let e = find(entries, name)?;
    if e.dims.len() != 3 {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: vec![0; 3],
            actual: e.dims.clone(),
        });
    }
    let data = e.data.iter().map(|&v| v as f64).collect();
    Ok(Array3::from_shape_vec((e.dims[0], e.dims[1], e.dims[2]), data).expect("dims checked"))
}

fn array4(entries: &[TensorEntry], name: &str) -> Result<Array4<f64>> {
    let e = find(entries, name)?;
    if e.dims.len() != 4 {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: vec![0; 4],
            actual: e.dims.clone(),
        });
    }
    let data = e.data.iter().map(|&v| v as f64).collect();
    Ok(Array4::from_shape_vec((e.dims[0], e.dims[1], e.dims[2], e.dims[3]), data)
        .expect("dims checked"))
}

impl PartMaps {
    pub fn to_tensors(&self) -> Vec<TensorEntry> {
        vec![
            entry("H", &self.heat),
            entry("D", &self.depth),
            entry("X", &self.disp_x),
            entry("Y", &self.disp_y),
        ]
    }

    pub fn from_tensors(entries: &[TensorEntry]) -> Result<Self> {
        let maps = Self {
            heat: array3(entries, "H")?,
            depth: array3(entries, "D")?,
            disp_x: array3(entries, "X")?,
            disp_y: array3(entries, "Y")?,
        };
        let s = maps.depth.shape().to_vec();
        for (name, a) in [("X", &maps.disp_x), ("Y", &maps.disp_y)] {
            if a.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: s.clone(),
                    actual: a.shape().to_vec(),
                });
            }
        }
        let hs = vec![s[0] + 1, s[1], s[2]];
        if maps.heat.shape() != hs.as_slice() {
            return Err(Error::ShapeMismatch {
                name: "H".into(),
                expected: hs,
                actual: maps.heat.shape().to_vec(),
            });
        }
        Ok(maps)
    }
}

impl GlobalPoseMap {
    pub fn from_tensors(entries: &[TensorEntry]) -> Result<Self> {
        let values = array4(entries, "P")?;
        let c = values.shape()[1];
        if c < BOX_CHANNELS || (c - BOX_CHANNELS) % PART_CHANNELS != 0 {
            return Err(Error::ShapeMismatch {
                name: "P".into(),
                expected: vec![values.shape()[0], BOX_CHANNELS, values.shape()[2], values.shape()[3]],
                actual: values.shape().to_vec(),
            });
        }
        Ok(Self { values })
    }
}

impl EncodedMaps {
    /// Entries `H, D, X, Y, Wd, Wt, P, Wp` in that order.
    pub fn to_tensors(&self) -> Vec<TensorEntry> {
        let mut out = self.parts.to_tensors();
        out.push(entry("Wd", &self.weights.depth));
        out.push(entry("Wt", &self.weights.disp));
        out.push(entry("P", &self.global.values));
        out.push(entry("Wp", &self.weights.pose));
        out
    }

    pub fn from_tensors(entries: &[TensorEntry]) -> Result<Self> {
        let parts = PartMaps::from_tensors(entries)?;
        let global = GlobalPoseMap::from_tensors(entries)?;
        let weights = MapWeights {
            depth: array3(entries, "Wd")?,
            disp: array3(entries, "Wt")?,
            pose: array4(entries, "Wp")?,
        };
        Ok(Self {
            parts,
            global,
            weights,
            collisions: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Part;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(gw: usize, gh: usize) -> GridSpec {
        GridSpec {
            stride: PART_STRIDE,
            gw,
            gh,
        }
    }

    /// Pose with part 0 at the given grid position and every other part unlabeled.
    fn single(k: usize, gx: f64, gy: f64, z: f64) -> Pose {
        let mut parts = vec![Part::unlabeled(); k];
        parts[0] = Part::new(gx * 8.0, gy * 8.0, z);
        Pose::new(parts)
    }

    #[test]
    fn grid_dimensions() {
        let g = GridSpec::for_image(224, 224, 8).unwrap();
        assert_eq!((g.gw, g.gh), (28, 28));
        let g = GridSpec::for_image(225, 100, 16).unwrap();
        assert_eq!((g.gw, g.gh), (15, 7));
        assert!(GridSpec::for_image(224, 224, 4).is_err());
    }

    #[test]
    fn heatmaps_empty_scene() {
        let h = encode_heatmaps(&[], 3, &grid(6, 5), &EncoderConfig::default());
        assert!(h.slice(ndarray::s![..3, .., ..]).iter().all(|&v| v == 0.0));
        assert!(h.slice(ndarray::s![3, .., ..]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn heatmap_peak_on_node() {
        let h = encode_heatmaps(&[single(2, 3.0, 2.0, 1.0)], 2, &grid(8, 8), &EncoderConfig::default());
        assert_eq!(h[[0, 2, 3]], 1.0);
        assert_eq!(h[[2, 2, 3]], 0.0);
        assert!(h.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn heatmap_max_rule() {
        let cfg = EncoderConfig {
            sigma: 1.0,
            ..Default::default()
        };
        // two instances 2σ away from cell (5, 5) on opposite sides
        let poses = [single(1, 3.0, 5.0, 1.0), single(1, 7.0, 5.0, 1.0)];
        let h = encode_heatmaps(&poses, 1, &grid(12, 12), &cfg);
        assert_abs_diff_eq!(h[[0, 5, 5]], (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn part_depth_without_poses_is_downsampled_raw() {
        let data: Vec<f64> = (0..32 * 16).map(|i| i as f64).collect();
        let raw = DepthImage::new(32, 16, data).unwrap();
        let g = GridSpec::for_image(32, 16, 8).unwrap();
        let (d, w) = encode_part_depth(&[], 2, &raw, &g, &EncoderConfig::default());
        for v in 0..2 {
            for u in 0..4 {
                assert_eq!(d[[1, v, u]], raw.get(u * 8, v * 8) / 1000.0);
            }
        }
        assert!(w.iter().all(|&x| x == 0.1));
    }

    #[test]
    fn part_depth_disk_has_thirteen_cells() {
        let raw = DepthImage::zeros(80, 80);
        let g = GridSpec::for_image(80, 80, 8).unwrap();
        let (d, w) = encode_part_depth(&[single(1, 5.0, 5.0, 2.0)], 1, &raw, &g, &EncoderConfig::default());
        // enumerate disk membership directly
        let mut expected = 0;
        for v in 0..10 {
            for u in 0..10 {
                let inside = ((u as f64 - 5.0).powi(2) + (v as f64 - 5.0).powi(2)).sqrt() <= 2.0;
                expected += inside as usize;
                assert_eq!(w[[0, v, u]] == 0.9, inside);
                assert_eq!(d[[0, v, u]], if inside { 2.0 } else { 0.0 });
            }
        }
        assert_eq!(expected, 13);
    }

    #[test]
    fn part_depth_z_buffer() {
        let raw = DepthImage::zeros(80, 80);
        let g = GridSpec::for_image(80, 80, 8).unwrap();
        let cfg = EncoderConfig::default();
        for order in [[2.5, 1.5], [1.5, 2.5]] {
            let poses = [single(1, 5.0, 5.0, order[0]), single(1, 5.5, 5.0, order[1])];
            let (d, _) = encode_part_depth(&poses, 1, &raw, &g, &cfg);
            assert_eq!(d[[0, 5, 5]], 1.5);
        }
    }

    #[test]
    fn tpdf_examples() {
        let cfg = EncoderConfig::default();
        let g = grid(12, 10);
        let (x, y, w) = encode_tpdf(&[single(1, 5.0, 5.0, 1.0)], 1, &g, &cfg);
        assert_eq!((x[[0, 5, 5]], y[[0, 5, 5]], w[[0, 5, 5]]), (0.0, 0.0, 1.0));

        let (x, y, _) = encode_tpdf(&[single(1, 5.5, 5.0, 1.0)], 1, &g, &cfg);
        assert_eq!((x[[0, 5, 5]], y[[0, 5, 5]]), (0.5, 0.0));

        let poses = [single(1, 4.0, 5.0, 1.0), single(1, 8.0, 5.0, 1.0)];
        let (x, y, w) = encode_tpdf(&poses, 1, &g, &cfg);
        assert_eq!((x[[0, 5, 6]], y[[0, 5, 6]], w[[0, 5, 6]]), (-2.0, 0.0, 1.0));
        // outside the truncation radius
        assert_eq!((x[[0, 0, 0]], w[[0, 0, 0]]), (0.0, 0.0));
    }

    #[test]
    fn tpdf_untruncated_covers_grid() {
        let cfg = EncoderConfig {
            radius: f64::INFINITY,
            ..Default::default()
        };
        let (x, _, w) = encode_tpdf(&[single(1, 1.0, 1.0, 1.0)], 1, &grid(9, 9), &cfg);
        assert!(w.iter().all(|&v| v == 1.0));
        assert_eq!(x[[0, 0, 8]], -7.0);
    }

    #[test]
    fn visibility_flags() {
        let raw = DepthImage::zeros(96, 96);
        let g = GridSpec::for_image(96, 96, 8).unwrap();
        let cfg = EncoderConfig::default();
        let front = single(1, 5.0, 5.0, 1.2);
        let back = single(1, 5.2, 5.0, 2.0);
        let (d, _) = encode_part_depth(&[front.clone(), back.clone()], 1, &raw, &g, &cfg);
        assert_eq!(assign_visibility(&front, &d, &g, 0.025), vec![false]);
        assert_eq!(assign_visibility(&back, &d, &g, 0.025), vec![true]);

        let close = single(1, 5.2, 5.0, 1.22);
        let (d, _) = encode_part_depth(&[front, close.clone()], 1, &raw, &g, &cfg);
        assert_eq!(assign_visibility(&close, &d, &g, 0.025), vec![false]);

        let off = single(1, -3.0, 5.0, 1.0);
        assert_eq!(assign_visibility(&off, &d, &g, 0.025), vec![true]);
        assert_eq!(assign_visibility(&single(2, 5.0, 5.0, 1.2), &d, &g, 0.025)[1], true);
    }

    fn g16(gw: usize, gh: usize) -> GridSpec {
        GridSpec {
            stride: GLOBAL_STRIDE,
            gw,
            gh,
        }
    }

    /// Two-part pose whose box in grid-16 units is `w × h` centred at `(cx, cy)`.
    fn boxed(cx: f64, cy: f64, w: f64, h: f64) -> Pose {
        Pose::new(vec![
            Part::new((cx - w / 2.0) * 16.0, (cy - h / 2.0) * 16.0, 2.0),
            Part::new((cx + w / 2.0) * 16.0, (cy + h / 2.0) * 16.0, 3.0),
        ])
    }

    #[test]
    fn global_map_empty_scene() {
        let cfg = EncoderConfig::default();
        let (m, w, c) = encode_global_pose_map(&[], &[], 2, &g16(4, 3), &cfg);
        assert_eq!(c, 0);
        assert!(m.values.iter().all(|&v| v == 0.0));
        for a in 0..2 {
            for ch in 0..pose_channels(2) {
                let want = if ch == CH_OBJ { 0.1 } else { 0.0 };
                assert!(w.slice(ndarray::s![a, ch, .., ..]).iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn global_map_anchor_sized_box() {
        let cfg = EncoderConfig::default();
        let pose = boxed(7.5, 6.5, 6.0, 12.0);
        let (m, w, _) = encode_global_pose_map(&[pose], &[vec![false, false]], 2, &g16(14, 14), &cfg);
        let cell = m.values.slice(ndarray::s![0, .., 6, 7]);
        assert_eq!((cell[CH_TX], cell[CH_TY]), (0.5, 0.5));
        assert_eq!((cell[CH_TW], cell[CH_TH], cell[CH_OBJ]), (0.0, 0.0, 1.0));
        assert_eq!(cell[part_channel(0, PART_DX)], -3.0);
        assert_eq!(cell[part_channel(1, PART_DY)], 6.0);
        assert_eq!(cell[part_channel(1, PART_Z)], 3.0);
        assert_eq!(cell[part_channel(1, PART_V)], 0.0);
        assert_eq!(w[[0, CH_OBJ, 6, 7]], 0.9);
        assert_eq!(w[[0, CH_TX, 6, 7]], 1.0);
        assert_eq!(w[[1, CH_OBJ, 6, 7]], 0.1);
        assert_eq!(w[[1, CH_TX, 6, 7]], 0.0);
    }

    #[test]
    fn global_map_picks_best_iou_anchor() {
        let cfg = EncoderConfig::default();
        // IOU by hand: 12x24 vs 6x12 -> 72/288 = 0.25; vs 3x6 -> 18/288 = 0.0625
        let b = BBox::from_center(10.5, 12.5, 12.0, 24.0);
        assert_abs_diff_eq!(iou(&b, &BBox::from_center(10.5, 12.5, 6.0, 12.0)), 0.25);
        assert_abs_diff_eq!(iou(&b, &BBox::from_center(10.5, 12.5, 3.0, 6.0)), 0.0625);
        let pose = boxed(10.5, 12.5, 12.0, 24.0);
        let (m, _, _) = encode_global_pose_map(&[pose], &[vec![false; 2]], 2, &g16(20, 26), &cfg);
        assert_eq!(m.values[[0, CH_OBJ, 12, 10]], 1.0);
        assert_eq!(m.values[[1, CH_OBJ, 12, 10]], 0.0);
        assert_abs_diff_eq!(m.values[[0, CH_TW, 12, 10]], 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.values[[0, CH_TH, 12, 10]], 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn global_map_collision_keeps_larger() {
        let cfg = EncoderConfig::default();
        let small = boxed(5.5, 5.5, 5.0, 10.0);
        let big = boxed(5.4, 5.6, 6.0, 12.0);
        let (m, _, c) = encode_global_pose_map(&[small, big], &[vec![false; 2], vec![false; 2]], 2, &g16(12, 12), &cfg);
        assert_eq!(c, 1);
        assert_abs_diff_eq!(m.values[[0, CH_TX, 5, 5]], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn global_map_unlabeled_parts() {
        let cfg = EncoderConfig::default();
        let mut pose = boxed(5.5, 5.5, 6.0, 12.0);
        pose.parts.push(Part::unlabeled());
        let (m, w, _) = encode_global_pose_map(&[pose], &[vec![false; 3]], 3, &g16(12, 12), &cfg);
        assert_eq!(m.values[[0, part_channel(2, PART_V), 5, 5]], 1.0);
        assert_eq!(w[[0, part_channel(2, PART_V), 5, 5]], 1.0);
        assert_eq!(w[[0, part_channel(2, PART_DX), 5, 5]], 0.0);
    }

    #[test]
    fn radius_serde_accepts_inf() {
        let cfg = EncoderConfig {
            radius: f64::INFINITY,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"radius\":\"inf\""));
        let back: EncoderConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<EncoderConfig>("{\"radius\": \"big\"}").is_err());
        let partial: EncoderConfig = serde_json::from_str("{\"radius\": 10}").unwrap();
        assert_eq!(partial.radius, 10.0);
        assert_eq!(partial.anchors, EncoderConfig::default().anchors);
    }

    #[test]
    fn tensors_round_trip_encoded_maps() {
        let raw = DepthImage::new(64, 48, vec![1500.0; 64 * 48]).unwrap();
        let pose = Pose::new(vec![Part::new(20.5, 17.0, 1.5), Part::new(30.0, 40.0, 1.6)]);
        let maps = encode(&[pose], 2, &raw, &EncoderConfig::default()).unwrap();
        let tensors = maps.to_tensors();
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["H", "D", "X", "Y", "Wd", "Wt", "P", "Wp"]);
        let back = EncodedMaps::from_tensors(&tensors).unwrap();
        assert_eq!(back.parts.heat.shape(), &[3, 6, 8]);
        assert_eq!(back.global.values.shape(), &[2, 13, 3, 4]);
        for (a, b) in back.parts.disp_x.iter().zip(maps.parts.disp_x.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut bad = tensors.clone();
        bad[2].dims = vec![2, 6, 4, 2];
        assert!(matches!(PartMaps::from_tensors(&bad), Err(Error::ShapeMismatch { .. })));
    }

    /// Per-cell nearest-instance scan, written independently of the
    /// instance-stamping implementation.
    fn tpdf_oracle(inst: &[(f64, f64)], g: &GridSpec, r: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for v in 0..g.gh {
            for u in 0..g.gw {
                let mut best: Option<(usize, f64)> = None;
                for (i, &(qx, qy)) in inst.iter().enumerate() {
                    let d = ((qx - u as f64).powi(2) + (qy - v as f64).powi(2)).sqrt();
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                out.push(match best {
                    Some((i, d)) if d <= r => (inst[i].0 - u as f64, inst[i].1 - v as f64, 1.0),
                    _ => (0.0, 0.0, 0.0),
                });
            }
        }
        out
    }

    proptest! {
        #[test]
        fn tpdf_matches_oracle(
            gw in 1usize..40, gh in 1usize..40,
            pts in prop::collection::vec((-3.0..43.0f64, -3.0..43.0f64), 0..6),
            r in prop::sample::select(vec![1.0, 2.0, 3.5, 10.0, f64::INFINITY]),
        ) {
            let g = grid(gw, gh);
            let poses: Vec<Pose> = pts.iter().map(|&(x, y)| single(1, x, y, 1.0)).collect();
            let cfg = EncoderConfig { radius: r, ..Default::default() };
            let (x, y, w) = encode_tpdf(&poses, 1, &g, &cfg);
            let oracle = tpdf_oracle(&pts, &g, r);
            for v in 0..gh {
                for u in 0..gw {
                    let (ox, oy, ow) = oracle[v * gw + u];
                    prop_assert_eq!(x[[0, v, u]].to_bits(), ox.to_bits());
                    prop_assert_eq!(y[[0, v, u]].to_bits(), oy.to_bits());
                    prop_assert_eq!(w[[0, v, u]], ow);
                    if ow == 1.0 {
                        prop_assert!((ox * ox + oy * oy).sqrt() <= r);
                    }
                }
            }
        }

        #[test]
        fn heatmap_peak_at_isolated_instance(x in 2.0..20.0f64, y in 2.0..20.0f64) {
            let g = grid(24, 24);
            let h = encode_heatmaps(&[single(1, x, y, 1.0)], 1, &g, &EncoderConfig::default());
            let (u, v) = g.nearest_cell(x, y).unwrap();
            let peak = h.slice(ndarray::s![0, .., ..]).iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(h[[0, v, u]], peak);
        }

        #[test]
        fn depth_z_buffer_law(pts in prop::collection::vec((2.0..10.0f64, 2.0..10.0f64, 0.5..5.0f64), 1..5)) {
            let raw = DepthImage::zeros(96, 96);
            let g = GridSpec::for_image(96, 96, 8).unwrap();
            let cfg = EncoderConfig::default();
            let poses: Vec<Pose> = pts.iter().map(|&(x, y, z)| single(1, x, y, z)).collect();
            let (d, w) = encode_part_depth(&poses, 1, &raw, &g, &cfg);
            for v in 0..12 {
                for u in 0..12 {
                    let covering: Vec<f64> = pts.iter()
                        .filter(|&&(x, y, _)| (x - u as f64).powi(2) + (y - v as f64).powi(2) <= 4.0)
                        .map(|&(_, _, z)| z)
                        .collect();
                    if covering.is_empty() {
                        prop_assert_eq!(w[[0, v, u]], 0.1);
                        prop_assert_eq!(d[[0, v, u]], 0.0);
                    } else {
                        prop_assert_eq!(w[[0, v, u]], 0.9);
                        prop_assert_eq!(d[[0, v, u]], covering.iter().cloned().fold(f64::INFINITY, f64::min));
                    }
                }
            }
        }
    }
}
