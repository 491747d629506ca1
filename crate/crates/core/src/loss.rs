//! Multi-stage weighted L2 objective and its analytic gradient.
//!
//! ```text
//! L   = L_h + L_d + L_t + L_p
//! L_h = Σ_s Σ_j ‖H^s_j − H*_j‖²                    (no weights)
//! L_d = Σ_s Σ_j Σ W^d_j (D^s_j − D*_j)²
//! L_t = Σ_s Σ_j Σ W^t_j [(X^s_j − X*_j)² + (Y^s_j − Y*_j)²]
//! L_p = Σ W^p (P − P*)²
//! ```
//!
//! Sums are plain (no normalisation) and always run in memory order so the
//! result is reproducible bit for bit.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedMaps, GlobalPoseMap, PartMaps};
use crate::error::{Error, Result};

/// Network outputs: `S` stages of part maps and one global pose map.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePredictions {
    pub stages: Vec<PartMaps>,
    pub global: GlobalPoseMap,
}

impl StagePredictions {
    /// The maps a decoder consumes: the last stage and the global pose map.
    pub fn final_stage(&self) -> &PartMaps {
        self.stages.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_h: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub l_p: f64,
    pub total: f64,
}

fn check<D: Dimension>(name: String, pred: &Array<f64, D>, gt: &Array<f64, D>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            name,
            expected: gt.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_shapes(pred: &StagePredictions, gt: &EncodedMaps) -> Result<()> {
    if pred.stages.is_empty() {
        return Err(Error::InvalidConfig("predictions need at least one stage".into()));
    }
    let g = &gt.parts;
    for (s, st) in pred.stages.iter().enumerate() {
        check(format!("stage {s} H"), &st.heat, &g.heat)?;
        check(format!("stage {s} D"), &st.depth, &g.depth)?;
        check(format!("stage {s} X"), &st.disp_x, &g.disp_x)?;
        check(format!("stage {s} Y"), &st.disp_y, &g.disp_y)?;
    }
    check("P".into(), &pred.global.values, &gt.global.values)?;
    check("Wd".into(), &gt.weights.depth, &g.depth)?;
    check("Wt".into(), &gt.weights.disp, &g.disp_x)?;
    check("Wp".into(), &gt.weights.pose, &gt.global.values)?;
    Ok(())
}

fn sq<D: Dimension>(pred: &Array<f64, D>, gt: &Array<f64, D>) -> f64 {
    let mut acc = 0.0;
    Zip::from(pred).and(gt).for_each(|&p, &g| acc += (p - g) * (p - g));
    acc
}

fn weighted_sq<D: Dimension>(pred: &Array<f64, D>, gt: &Array<f64, D>, w: &Array<f64, D>) -> f64 {
    let mut acc = 0.0;
    Zip::from(pred)
        .and(gt)
        .and(w)
        .for_each(|&p, &g, &w| acc += w * (p - g) * (p - g));
    acc
}

pub fn total_loss(pred: &StagePredictions, gt: &EncodedMaps) -> Result<LossBreakdown> {
    check_shapes(pred, gt)?;
    let g = &gt.parts;
    let w = &gt.weights;
    let mut out = LossBreakdown::default();
    for st in &pred.stages {
        out.l_h += sq(&st.heat, &g.heat);
        out.l_d += weighted_sq(&st.depth, &g.depth, &w.depth);
        out.l_t += weighted_sq(&st.disp_x, &g.disp_x, &w.disp) + weighted_sq(&st.disp_y, &g.disp_y, &w.disp);
    }
    out.l_p = weighted_sq(&pred.global.values, &gt.global.values, &w.pose);
    out.total = out.l_h + out.l_d + out.l_t + out.l_p;
    Ok(out)
}

fn grad<D: Dimension>(pred: &Array<f64, D>, gt: &Array<f64, D>, w: Option<&Array<f64, D>>) -> Array<f64, D> {
    match w {
        None => Zip::from(pred).and(gt).map_collect(|&p, &g| 2.0 * (p - g)),
        Some(w) => Zip::from(pred)
            .and(gt)
            .and(w)
            .map_collect(|&p, &g, &w| 2.0 * w * (p - g)),
    }
}

/// ∂L/∂prediction for every predicted map, shaped like `pred`.
pub fn loss_gradients(pred: &StagePredictions, gt: &EncodedMaps) -> Result<StagePredictions> {
    check_shapes(pred, gt)?;
    let g = &gt.parts;
    let w = &gt.weights;
    let stages = pred
        .stages
        .iter()
        .map(|st| PartMaps {
            heat: grad(&st.heat, &g.heat, None),
            depth: grad(&st.depth, &g.depth, Some(&w.depth)),
            disp_x: grad(&st.disp_x, &g.disp_x, Some(&w.disp)),
            disp_y: grad(&st.disp_y, &g.disp_y, Some(&w.disp)),
        })
        .collect();
    Ok(StagePredictions {
        stages,
        global: GlobalPoseMap {
            values: grad(&pred.global.values, &gt.global.values, Some(&w.pose)),
        },
    })
}

/// Mutable views of every prediction entry in a fixed order: stage by stage
/// `H, D, X, Y`, then `P`.
pub fn entries_mut(pred: &mut StagePredictions) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    for st in pred.stages.iter_mut() {
        out.extend(st.heat.iter_mut());
        out.extend(st.depth.iter_mut());
        out.extend(st.disp_x.iter_mut());
        out.extend(st.disp_y.iter_mut());
    }
    out.extend(pred.global.values.iter_mut());
    out
}

/// Entry `i` in the order of [`entries_mut`], without collecting the rest.
pub fn entry_mut(pred: &mut StagePredictions, mut i: usize) -> Option<&mut f64> {
    for st in pred.stages.iter_mut() {
        for a in [&mut st.heat, &mut st.depth, &mut st.disp_x, &mut st.disp_y] {
            if i < a.len() {
                return nth_mut(a, i);
            }
            i -= a.len();
        }
    }
    nth_mut(&mut pred.global.values, i)
}

fn nth_mut<D: Dimension>(a: &mut Array<f64, D>, i: usize) -> Option<&mut f64> {
    if a.is_standard_layout() {
        a.as_slice_mut().and_then(|s| s.get_mut(i))
    } else {
        a.iter_mut().nth(i)
    }
}

/// Entries of a prediction in the order of [`entries_mut`].
pub fn entries(pred: &StagePredictions) -> Vec<f64> {
    let mut out = Vec::new();
    for st in &pred.stages {
        out.extend(st.heat.iter().copied());
        out.extend(st.depth.iter().copied());
        out.extend(st.disp_x.iter().copied());
        out.extend(st.disp_y.iter().copied());
    }
    out.extend(pred.global.values.iter().copied());
    out
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Central-difference check of [`loss_gradients`] against [`total_loss`].
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// entries with zero weight from dividing by zero.
pub fn gradient_check(pred: &StagePredictions, gt: &EncodedMaps, h: f64) -> Result<GradCheck> {
    const FLOOR: f64 = 1e-6;
    let analytic = entries(&loss_gradients(pred, gt)?);
    let values = entries(pred);
    let mut work = pred.clone();
    let n = analytic.len();
    let mut out = GradCheck {
        entries: n,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = values[i];
        *entry_mut(&mut work, i).expect("index within entries") = orig + h;
        let up = total_loss(&work, gt)?.total;
        *entry_mut(&mut work, i).expect("index within entries") = orig - h;
        let down = total_loss(&work, gt)?.total;
        *entry_mut(&mut work, i).expect("index within entries") = orig;
        let num = (up - down) / (2.0 * h);
        let abs = (a - num).abs();
        let rel = abs / a.abs().max(num.abs()).max(FLOOR);
        out.max_abs_error = out.max_abs_error.max(abs);
        out.max_rel_error = out.max_rel_error.max(rel);
    }
    Ok(out)
}
