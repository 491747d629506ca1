//! Run configuration: one JSON document, every field optional, with command
//! line flags applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use popparts_core::decoder::FusionConfig;
use popparts_core::encoder::EncoderConfig;
use popparts_core::metrics::MetricConfig;
use popparts_core::pipeline::{GradCheckParams, PipelineConfig, RoundTripParams};
use popparts_core::synth::OracleNoise;
use popparts_core::{CameraIntrinsics, Error as CoreError, Skeleton};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Random augmentation ranges used by `augment` when a parameter is not
/// given on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Depth rescale factor range.
    pub scale_range: (f64, f64),
    /// Rotation is drawn from `[-max_angle, max_angle]` degrees.
    pub max_angle: f64,
    /// Smallest crop side as a fraction of the frame.
    pub min_crop: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_range: (0.7, 1.7),
            max_angle: 30.0,
            min_crop: 0.8,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> CliResult<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CliError::Invariant(format!("augment: scale range {lo}:{hi} is invalid")));
        }
        if !(self.max_angle >= 0.0 && self.max_angle <= 180.0) {
            return Err(CliError::Invariant(format!("augment: max_angle {} outside [0, 180]", self.max_angle)));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(CliError::Invariant(format!("augment: min_crop {} outside (0, 1]", self.min_crop)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Skeleton JSON; the built-in 15-part skeleton when absent.
    pub skeleton: Option<PathBuf>,
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub metrics: MetricConfig,
    pub noise: OracleNoise,
    pub roundtrip: RoundTripParams,
    pub augment: AugmentParams,
    pub gradcheck: GradCheckParams,
    /// `gradcheck` fails when the largest relative error reaches this.
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            skeleton: None,
            seed: 0,
            camera: p.camera,
            encoder: p.encoder,
            fusion: p.fusion,
            metrics: p.metrics,
            noise: p.noise,
            roundtrip: p.roundtrip,
            augment: AugmentParams::default(),
            gradcheck: GradCheckParams::default(),
            gradcheck_tolerance: 1e-4,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub radius: Option<f64>,
    pub mask_half: Option<usize>,
    pub conf_thresh: Option<f64>,
    pub vis_thresh: Option<f64>,
    pub nms_iou: Option<f64>,
    pub aug_range: Option<(f64, f64)>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Data(format!("config: {}", CoreError::from(e))))
    }

    /// Normalised form: every field spelled out, pretty printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Reads `path` (defaults when `None`), applies `ov`, validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Data(m) => CliError::Data(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(r) = ov.radius {
            self.encoder.radius = r;
        }
        if let Some(h) = ov.mask_half {
            self.fusion.mask_half = h;
        }
        if let Some(t) = ov.conf_thresh {
            self.fusion.conf_thresh = t;
        }
        if let Some(t) = ov.vis_thresh {
            self.fusion.vis_thresh = t;
        }
        if let Some(t) = ov.nms_iou {
            self.fusion.nms_iou = t;
        }
        if let Some(r) = ov.aug_range {
            self.augment.scale_range = r;
            self.roundtrip.aug_range = Some(r);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pipeline().validate()?;
        self.augment.validate()?;
        self.gradcheck.validate()?;
        if !(self.gradcheck_tolerance > 0.0) {
            return Err(CliError::Invariant(format!(
                "gradcheck_tolerance must be positive, got {}",
                self.gradcheck_tolerance
            )));
        }
        if let Some(p) = &self.skeleton {
            if !p.is_file() {
                return Err(CliError::Data(format!("skeleton file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            camera: self.camera,
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            metrics: self.metrics,
            noise: self.noise,
            roundtrip: self.roundtrip,
        }
    }

    pub fn load_skeleton(&self) -> CliResult<Skeleton> {
        let Some(p) = &self.skeleton else {
            return Ok(Skeleton::itop15());
        };
        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let sk: Skeleton = serde_json::from_str(&text).map_err(|e| CliError::in_file(p, e.into()))?;
        sk.validate().map_err(|e| CliError::in_file(p, e))?;
        Ok(sk)
    }
}

/// Parses `LO:HI`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok((num(lo)?, num(hi)?))
}

/// Parses a radius: a number or `inf`.
pub fn parse_radius(s: &str) -> Result<f64, String> {
    match s {
        "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
        _ => s.parse::<f64>().map_err(|e| format!("`{s}`: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn normalised_round_trip() {
        let cfg = RunConfig::from_json(r#"{"seed": 4, "encoder": {"radius": "inf"}, "fusion": {"mask_half": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert!(cfg.encoder.radius.is_infinite());
        let text = cfg.to_json();
        let again = RunConfig::from_json(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), text);
    }

    #[test]
    fn unknown_top_level_key_is_reported_with_position() {
        let err = RunConfig::from_json("{\n  \"sede\": 1\n}").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn flags_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            radius: Some(f64::INFINITY),
            mask_half: Some(1),
            conf_thresh: Some(0.3),
            vis_thresh: Some(0.6),
            nms_iou: Some(0.5),
            aug_range: Some((0.8, 1.2)),
        });
        assert_eq!(cfg.seed, 9);
        assert!(cfg.encoder.radius.is_infinite());
        assert_eq!(cfg.fusion.mask_half, 1);
        assert_eq!((cfg.fusion.conf_thresh, cfg.fusion.vis_thresh, cfg.fusion.nms_iou), (0.3, 0.6, 0.5));
        assert_eq!(cfg.roundtrip.aug_range, Some((0.8, 1.2)));
        assert_eq!(cfg.augment.scale_range, (0.8, 1.2));
    }

    #[test]
    fn invalid_values_are_invariant_errors() {
        let mut cfg = RunConfig::default();
        cfg.fusion.nms_iou = 1.5;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 3);
        let mut cfg = RunConfig::default();
        cfg.augment.scale_range = (1.2, 0.8);
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 3);
        let mut cfg = RunConfig::default();
        cfg.skeleton = Some(PathBuf::from("/nonexistent/skeleton.json"));
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn range_and_radius_parsing() {
        assert_eq!(parse_range("0.7:1.7"), Ok((0.7, 1.7)));
        assert!(parse_range("0.7").is_err());
        assert!(parse_range("a:1").is_err());
        assert_eq!(parse_radius("inf"), Ok(f64::INFINITY));
        assert_eq!(parse_radius("2"), Ok(2.0));
        assert!(parse_radius("two").is_err());
    }
}
