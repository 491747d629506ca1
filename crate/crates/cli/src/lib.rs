//! `popparts` command line: argument parsing, configuration loading, worker
//! pool setup and output routing. The commands themselves live in
//! [`commands`].

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{AugmentInputs, AugmentMode, CmdOutput};
use crate::config::{parse_radius, parse_range, Overrides, RunConfig};
use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "POPPARTS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "popparts", version, about = "Multi-person depth pose maps: encode, decode, evaluate, augment, synthesise")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Displacement field truncation radius in grid cells, or `inf`.
    #[arg(long, global = true, value_name = "R", value_parser = parse_radius)]
    pub radius: Option<f64>,
    #[arg(long, global = true, value_name = "H")]
    pub mask_half: Option<usize>,
    #[arg(long, global = true, value_name = "T")]
    pub conf_thresh: Option<f64>,
    #[arg(long, global = true, value_name = "T")]
    pub vis_thresh: Option<f64>,
    #[arg(long, global = true, value_name = "T")]
    pub nms_iou: Option<f64>,
    /// Depth rescale range; also enables rescaling in `roundtrip`.
    #[arg(long, global = true, value_name = "LO:HI", value_parser = parse_range)]
    pub aug_range: Option<(f64, f64)>,
    /// Report destination (stdout when absent); output prefix for
    /// `synth` and `augment`, tensor file for `encode`.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            radius: self.radius,
            mask_half: self.mask_half,
            conf_thresh: self.conf_thresh,
            vis_thresh: self.vis_thresh,
            nms_iou: self.nms_iou,
            aug_range: self.aug_range,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Depth PGM + pose JSON -> ground-truth tensor file (--out).
    Encode { depth: PathBuf, labels: PathBuf },
    /// Tensor file -> decoded poses.
    Decode { maps: PathBuf },
    /// Decoded poses vs ground truth, aggregated over all pairs.
    Eval {
        #[arg(long = "pred", required = true, value_name = "PATH")]
        preds: Vec<PathBuf>,
        #[arg(long = "gt", required = true, value_name = "PATH")]
        gts: Vec<PathBuf>,
    },
    /// One augmentation of a labeled depth image; writes PREFIX.pgm/.json.
    Augment {
        depth: PathBuf,
        labels: PathBuf,
        #[arg(long, value_enum)]
        mode: AugModeArg,
        /// Foreground mask (composite).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Background depth (composite).
        #[arg(long)]
        background: Option<PathBuf>,
        /// Rotation in degrees (rotate); random when absent.
        #[arg(long, allow_negative_numbers = true)]
        angle: Option<f64>,
        /// Depth scale factor (scale); random when absent.
        #[arg(long)]
        scale: Option<f64>,
        /// Index of the pose the mask belongs to (composite).
        #[arg(long)]
        pose: Option<usize>,
    },
    /// Renders one synthetic scene; writes PREFIX.pgm/.json/.mask<i>.pgm.
    Synth {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Synthetic encode -> oracle -> decode -> evaluate loop.
    Roundtrip,
    /// Loss gradients against finite differences.
    Gradcheck,
    /// Prints the normalised configuration.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugModeArg {
    Flip,
    Rotate,
    Scale,
    Composite,
}

impl From<AugModeArg> for AugmentMode {
    fn from(m: AugModeArg) -> Self {
        match m {
            AugModeArg::Flip => AugmentMode::Flip,
            AugModeArg::Rotate => AugmentMode::Rotate,
            AugModeArg::Scale => AugmentMode::Scale,
            AugModeArg::Composite => AugmentMode::Composite,
        }
    }
}

/// Worker pool sized by `POPPARTS_THREADS` (all cores when unset).
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))
}

fn require_out<'a>(out: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    out.as_deref().ok_or_else(|| CliError::Usage(format!("{what} needs --out")))
}

/// Runs a parsed command line and returns what to print.
pub fn execute(cli: &Cli) -> CliResult<CmdOutput> {
    let g = &cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), &g.overrides())?;
    let pool = thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Encode { depth, labels } => commands::cmd_encode(&cfg, depth, labels, require_out(&g.out, "encode")?),
        Command::Decode { maps } => commands::cmd_decode(&cfg, maps),
        Command::Eval { preds, gts } => {
            if preds.len() != gts.len() {
                return Err(CliError::Usage(format!("{} --pred files but {} --gt files", preds.len(), gts.len())));
            }
            let pairs: Vec<_> = preds.iter().cloned().zip(gts.iter().cloned()).collect();
            commands::cmd_eval(&cfg, &pairs)
        }
        Command::Augment {
            depth,
            labels,
            mode,
            mask,
            background,
            angle,
            scale,
            pose,
        } => {
            let inp = AugmentInputs {
                depth: depth.clone(),
                labels: labels.clone(),
                mask: mask.clone(),
                background: background.clone(),
                angle: *angle,
                scale: *scale,
                pose: *pose,
            };
            commands::cmd_augment(&cfg, (*mode).into(), &inp, require_out(&g.out, "augment")?)
        }
        Command::Synth { index } => commands::cmd_synth(&cfg, *index, require_out(&g.out, "synth")?),
        Command::Roundtrip => commands::cmd_roundtrip(&cfg),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        Command::Config => Ok(commands::cmd_config(&cfg)),
    })
}

/// Whether `--out` names the report file (as opposed to a data output).
fn report_goes_to_out(cmd: &Command) -> bool {
    !matches!(cmd, Command::Encode { .. } | Command::Augment { .. } | Command::Synth { .. })
}

/// Full command line handling; returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
        }
    };
    let result = execute(&cli).and_then(|out| {
        let text = match cli.global.format {
            Format::Json => &out.json,
            Format::Table => &out.table,
        };
        match (&cli.global.out, report_goes_to_out(&cli.command)) {
            (Some(p), true) => commands::write_text(p, text)?,
            _ => stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Data(format!("stdout: {e}")))?,
        }
        out.failure.map_or(Ok(()), Err)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
