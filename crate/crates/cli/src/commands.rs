//! One function per subcommand. Each returns the report in both output
//! formats; files the command produces are written before it returns.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use popparts_core::augment::{composite_background, hflip, rotate_crop, RotateCrop, SegmentedSample};
use popparts_core::decoder::{decode_full, DecodedPose, FusionMode};
use popparts_core::encoder::{encode, GlobalPoseMap, PartMaps};
use popparts_core::geometry::depth_rescale;
use popparts_core::io::{read_depth_pgm, read_mask_pgm, read_tensors, write_depth_pgm, write_mask_pgm, write_tensors, PoseDocument};
use popparts_core::metrics::{EvalReport, Evaluator};
use popparts_core::pipeline::{aggregate, gradcheck_instance, run_scene, summarize_gradcheck, synth_scene, GradCheckReport, RoundTripReport};
use popparts_core::loss::gradient_check;
use popparts_core::{BBox, DepthImage, Detection, Skeleton};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// What a command prints, plus an optional failure that sets the exit status
/// after the report has been written.
#[derive(Debug)]
pub struct CmdOutput {
    pub json: String,
    pub table: String,
    pub failure: Option<CliError>,
}

impl CmdOutput {
    fn new<T: Serialize>(value: &T, table: String) -> Self {
        Self {
            json: to_json(value),
            table,
            failure: None,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialise");
    s.push('\n');
    s
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_depth(path: &Path) -> CliResult<DepthImage> {
    read_depth_pgm(open(path)?).map_err(|e| CliError::in_file(path, e))
}

pub fn read_poses(path: &Path) -> CliResult<PoseDocument> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    PoseDocument::from_json(&text).map_err(|e| CliError::in_file(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn save_depth(path: &Path, img: &DepthImage) -> CliResult<()> {
    let mut w = create(path)?;
    write_depth_pgm(img, &mut w).map_err(|e| CliError::in_file(path, e))?;
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `PREFIX` + `suffix`, keeping the directory of the prefix.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_skeleton(cfg: &RunConfig, doc: &PoseDocument, path: &Path) -> CliResult<Skeleton> {
    let sk = cfg.load_skeleton()?;
    if cfg.skeleton.is_some() && sk.k != doc.skeleton.k {
        return Err(CliError::Data(format!(
            "{}: document skeleton has {} parts, configured skeleton {}",
            path.display(),
            doc.skeleton.k,
            sk.k
        )));
    }
    Ok(doc.skeleton.clone())
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct EncodeSummary {
    poses: usize,
    part_grid: (usize, usize),
    pose_grid: (usize, usize),
    collisions: usize,
    tensors: Vec<String>,
}

/// Depth image and labels to a tensor file at `out`.
pub fn cmd_encode(cfg: &RunConfig, depth: &Path, labels: &Path, out: &Path) -> CliResult<CmdOutput> {
    let img = read_depth(depth)?;
    let doc = read_poses(labels)?;
    let sk = check_skeleton(cfg, &doc, labels)?;
    let maps = encode(&doc.poses, sk.k, &img, &cfg.encoder)?;
    let tensors = maps.to_tensors();
    let mut w = create(out)?;
    write_tensors(&tensors, &mut w).map_err(|e| CliError::in_file(out, e))?;
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let (pg, gg) = (maps.parts.grid(), maps.global.grid());
    let summary = EncodeSummary {
        poses: doc.poses.len(),
        part_grid: (pg.gw, pg.gh),
        pose_grid: (gg.gw, gg.gh),
        collisions: maps.collisions,
        tensors: tensors.iter().map(|t| t.name.clone()).collect(),
    };
    let table = format!(
        "encoded {} poses: part grid {}x{}, pose grid {}x{}, slot collisions {}\n",
        summary.poses, pg.gw, pg.gh, gg.gw, gg.gh, summary.collisions
    );
    Ok(CmdOutput::new(&summary, table))
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

/// Decoder output and `eval` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeDocument {
    pub skeleton: Skeleton,
    pub poses: Vec<DecodedPose>,
}

/// Tensor file (`H, D, X, Y, P`) to poses.
pub fn cmd_decode(cfg: &RunConfig, maps: &Path) -> CliResult<CmdOutput> {
    let sk = cfg.load_skeleton()?;
    let entries = read_tensors(open(maps)?).map_err(|e| CliError::in_file(maps, e))?;
    let parts = PartMaps::from_tensors(&entries).map_err(|e| CliError::in_file(maps, e))?;
    let global = GlobalPoseMap::from_tensors(&entries).map_err(|e| CliError::in_file(maps, e))?;
    if parts.k() != sk.k {
        return Err(CliError::Data(format!(
            "{}: maps hold {} parts, skeleton has {}",
            maps.display(),
            parts.k(),
            sk.k
        )));
    }
    if global.anchors() != cfg.encoder.anchors.len() {
        return Err(CliError::Data(format!(
            "{}: pose map has {} anchors, configuration {}",
            maps.display(),
            global.anchors(),
            cfg.encoder.anchors.len()
        )));
    }
    let poses = decode_full(&parts, &global, &cfg.encoder.anchors, &cfg.fusion)?;
    let mut table = String::new();
    let _ = writeln!(table, "{:<5} {:>7} {:>30} {:>4} {:>4} {:>4}", "pose", "score", "box", "A", "B", "C");
    for (i, p) in poses.iter().enumerate() {
        let count = |m: FusionMode| p.parts.iter().filter(|q| q.labeled && q.mode == m).count();
        let b = &p.bbox;
        let _ = writeln!(
            table,
            "{:<5} {:>7.4} {:>30} {:>4} {:>4} {:>4}",
            i,
            p.score,
            format!("({:.1}, {:.1}, {:.1}, {:.1})", b.x_min, b.y_min, b.x_max, b.y_max),
            count(FusionMode::A),
            count(FusionMode::B),
            count(FusionMode::C)
        );
    }
    Ok(CmdOutput::new(&DecodeDocument { skeleton: sk, poses }, table))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn load_pair(pred: &Path, gt: &Path) -> CliResult<(Vec<Detection>, PoseDocument)> {
    let text = fs::read_to_string(pred).map_err(|e| CliError::Data(format!("{}: {e}", pred.display())))?;
    let doc: DecodeDocument = serde_json::from_str(&text).map_err(|e| CliError::in_file(pred, e.into()))?;
    let gt_doc = read_poses(gt)?;
    if doc.skeleton.k != gt_doc.skeleton.k {
        return Err(CliError::Data(format!(
            "{}: predictions have {} parts, ground truth {} has {}",
            pred.display(),
            doc.skeleton.k,
            gt.display(),
            gt_doc.skeleton.k
        )));
    }
    let dets = doc.poses.iter().map(DecodedPose::detection).collect();
    Ok((dets, gt_doc))
}

/// Scores prediction files against ground-truth files, pairwise. Files are
/// loaded in parallel and evaluated in the given order.
pub fn cmd_eval(cfg: &RunConfig, pairs: &[(PathBuf, PathBuf)]) -> CliResult<CmdOutput> {
    if pairs.is_empty() {
        return Err(CliError::Usage("eval needs at least one --pred/--gt pair".into()));
    }
    let loaded = pairs
        .par_iter()
        .map(|(p, g)| load_pair(p, g))
        .collect::<CliResult<Vec<_>>>()?;
    let skeleton = match &cfg.skeleton {
        Some(_) => cfg.load_skeleton()?,
        None => loaded[0].1.skeleton.clone(),
    };
    let mut ev = Evaluator::new(&skeleton, &cfg.camera, &cfg.metrics)?;
    for ((dets, gt), (p, _)) in loaded.iter().zip(pairs) {
        ev.add_scene(dets, &gt.poses).map_err(|e| CliError::in_file(p, e))?;
    }
    let report: EvalReport = ev.report();
    let table = report.to_table();
    Ok(CmdOutput::new(&report, table))
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Flip,
    Rotate,
    Scale,
    Composite,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentInputs {
    pub depth: PathBuf,
    pub labels: PathBuf,
    pub mask: Option<PathBuf>,
    pub background: Option<PathBuf>,
    pub angle: Option<f64>,
    pub scale: Option<f64>,
    /// Pose the mask belongs to (composite); required when the document
    /// holds more than one.
    pub pose: Option<usize>,
}

#[derive(Debug, Serialize)]
struct AugmentSummary {
    mode: AugmentMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    poses: usize,
    labeled_parts: usize,
    depth: PathBuf,
    labels: PathBuf,
}

/// Applies one augmentation and writes `PREFIX.pgm` and `PREFIX.json`.
/// Parameters not given are drawn from the configured ranges with the run
/// seed.
pub fn cmd_augment(cfg: &RunConfig, mode: AugmentMode, inp: &AugmentInputs, prefix: &Path) -> CliResult<CmdOutput> {
    let img = read_depth(&inp.depth)?;
    let doc = read_poses(&inp.labels)?;
    let sk = check_skeleton(cfg, &doc, &inp.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let aug = &cfg.augment;
    let (mut angle, mut crop, mut scale) = (None, None, None);
    let (out_img, poses) = match mode {
        AugmentMode::Flip => hflip(&img, &doc.poses, &sk),
        AugmentMode::Rotate => {
            let a = inp.angle.unwrap_or_else(|| rng.random_range(-aug.max_angle..=aug.max_angle));
            let (w, h) = (img.width() as f64, img.height() as f64);
            let f = rng.random_range(aug.min_crop..=1.0);
            let (x0, y0) = (rng.random_range(0.0..=w * (1.0 - f)), rng.random_range(0.0..=h * (1.0 - f)));
            let rc = RotateCrop {
                angle: a,
                crop: BBox::new(x0, y0, x0 + w * f, y0 + h * f),
                out_width: img.width(),
                out_height: img.height(),
            };
            angle = Some(a);
            crop = Some(rc.crop);
            rotate_crop(&img, &doc.poses, &rc)?
        }
        AugmentMode::Scale => {
            let (lo, hi) = aug.scale_range;
            let a = inp.scale.unwrap_or_else(|| if lo == hi { lo } else { rng.random_range(lo..=hi) });
            scale = Some(a);
            depth_rescale(&img, &doc.poses, &cfg.camera, a)?
        }
        AugmentMode::Composite => {
            let (Some(mask), Some(bg)) = (&inp.mask, &inp.background) else {
                return Err(CliError::Usage("composite needs --mask and --background".into()));
            };
            let pose = match (inp.pose, doc.poses.len()) {
                (Some(i), n) if i < n => &doc.poses[i],
                (None, 1) => &doc.poses[0],
                (Some(i), n) => {
                    return Err(CliError::Data(format!("{}: pose {i} requested, document has {n}", inp.labels.display())));
                }
                (None, n) => {
                    return Err(CliError::Usage(format!(
                        "{} holds {n} poses; pick the one the mask belongs to with --pose",
                        inp.labels.display()
                    )));
                }
            };
            let m = read_mask_pgm(open(mask)?).map_err(|e| CliError::in_file(mask, e))?;
            let background = read_depth(bg)?;
            let sample = SegmentedSample::new(img, m, pose.clone()).map_err(|e| CliError::in_file(mask, e))?;
            let (d, p) = composite_background(&sample, &background).map_err(|e| CliError::in_file(bg, e))?;
            (d, vec![p])
        }
    };
    let depth_path = with_suffix(prefix, ".pgm");
    let labels_path = with_suffix(prefix, ".json");
    save_depth(&depth_path, &out_img)?;
    let out_doc = PoseDocument { skeleton: sk, poses };
    write_text(&labels_path, &out_doc.to_json()?)?;
    let summary = AugmentSummary {
        mode,
        angle,
        crop,
        scale,
        poses: out_doc.poses.len(),
        labeled_parts: out_doc.poses.iter().map(|p| p.labeled_count()).sum(),
        depth: depth_path,
        labels: labels_path,
    };
    let table = format!(
        "{:?}: {} poses, {} labeled parts -> {}, {}\n",
        mode,
        summary.poses,
        summary.labeled_parts,
        summary.depth.display(),
        summary.labels.display()
    );
    Ok(CmdOutput::new(&summary, table))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct SynthSummary {
    seed: u64,
    index: usize,
    figures: usize,
    labeled_parts: usize,
    occluded_parts: usize,
    files: Vec<PathBuf>,
}

/// Renders scene `index` of the round trip for the run seed and writes
/// `PREFIX.pgm`, `PREFIX.json` and one `PREFIX.mask<i>.pgm` per figure.
pub fn cmd_synth(cfg: &RunConfig, index: usize, prefix: &Path) -> CliResult<CmdOutput> {
    if cfg.skeleton.is_some() && cfg.load_skeleton()? != Skeleton::itop15() {
        return Err(CliError::Invariant("synthetic figures exist only for the built-in skeleton".into()));
    }
    let scene = synth_scene(&cfg.pipeline(), cfg.seed, index)?;
    let mut files = vec![with_suffix(prefix, ".pgm"), with_suffix(prefix, ".json")];
    save_depth(&files[0], &scene.depth)?;
    let doc = PoseDocument {
        skeleton: Skeleton::itop15(),
        poses: scene.poses,
    };
    write_text(&files[1], &doc.to_json()?)?;
    for (i, m) in scene.masks.iter().enumerate() {
        let p = with_suffix(prefix, &format!(".mask{i}.pgm"));
        let mut w = create(&p)?;
        write_mask_pgm(m, &mut w).map_err(|e| CliError::in_file(&p, e))?;
        w.flush().map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        files.push(p);
    }
    let labeled = doc.poses.iter().flat_map(|p| p.labeled()).count();
    let occluded = doc.poses.iter().flat_map(|p| p.labeled()).filter(|(_, q)| !q.visible).count();
    let summary = SynthSummary {
        seed: cfg.seed,
        index,
        figures: doc.poses.len(),
        labeled_parts: labeled,
        occluded_parts: occluded,
        files,
    };
    let table = format!(
        "scene {} (seed {}): {} figures, {} labeled parts, {} occluded\n",
        index, cfg.seed, summary.figures, labeled, occluded
    );
    Ok(CmdOutput::new(&summary, table))
}

// ---------------------------------------------------------------------------
// roundtrip
// ---------------------------------------------------------------------------

/// Full synthetic loop; scenes run in parallel and aggregate in index order,
/// so the report does not depend on the worker count.
pub fn cmd_roundtrip(cfg: &RunConfig) -> CliResult<CmdOutput> {
    let p = cfg.pipeline();
    p.validate()?;
    let outcomes = (0..p.roundtrip.scenes)
        .into_par_iter()
        .map(|i| run_scene(&p, cfg.seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    let report: RoundTripReport = aggregate(&p, cfg.seed, &outcomes)?;
    let table = report.to_table();
    Ok(CmdOutput::new(&report, table))
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Analytic loss gradients against central differences on random
/// instances; fails with an invariant violation above the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<CmdOutput> {
    let params = &cfg.gradcheck;
    params.validate()?;
    cfg.encoder.validate()?;
    let checks = (0..params.instances)
        .into_par_iter()
        .map(|i| {
            let (pred, gt) = gradcheck_instance(&cfg.encoder, params, cfg.seed, i)?;
            gradient_check(&pred, &gt, params.step)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report: GradCheckReport = summarize_gradcheck(cfg.seed, &checks);
    let table = format!(
        "gradient check: {} instances, {} entries, max relative error {:.3e}, max absolute error {:.3e}\n",
        report.instances, report.entries, report.max_rel_error, report.max_abs_error
    );
    let mut out = CmdOutput::new(&report, table);
    if !(report.max_rel_error < cfg.gradcheck_tolerance) {
        out.failure = Some(CliError::Invariant(format!(
            "max relative gradient error {:e} (instance {}) reaches tolerance {:e}",
            report.max_rel_error, report.worst_instance, cfg.gradcheck_tolerance
        )));
    }
    Ok(out)
}

/// The normalised configuration.
pub fn cmd_config(cfg: &RunConfig) -> CmdOutput {
    let mut json = cfg.to_json();
    json.push('\n');
    CmdOutput {
        table: json.clone(),
        json,
        failure: None,
    }
}
