//! Command-line workflows tying the library together: timestamp
//! association, depth evaluation, map post-processing, direct pair
//! optimization on synthetic scenes, filter comparison studies, and
//! synthetic-scene export.
//!
//! Every command is deterministic given its inputs. Parameters come from an
//! optional `key = value` config file plus flags; flags win. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::HashMap;
use std::error::Error as _;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::dataset::{associate_frames, format_association, parse_listing};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::image::DepthMap;
use crate::io::{
    load_depth_png, load_depth_raw, save_depth_png, save_depth_raw, save_image,
    DEFAULT_DEPTH_DIVISOR,
};
use crate::losses::{LossWeights, ScaleStrategy};
use crate::metrics::{
    aggregate_reports, depth_metrics, format_table, reports_json, MetricOptions, MetricReport,
};
use crate::optimizer::{optimize_pair, trace_csv, PairProblem, RunStatus, Schedule};
use crate::postprocess::{
    apply_filter, default_filter_grid, elwf_combine, godard_postprocess, FilterKind, FilterSpec,
};
use crate::synth::{make_synthetic_scene, DepthProfile, SceneSpec};

#[derive(Parser)]
#[command(
    name = "warpdepth",
    version,
    about = "Depth-from-motion toolkit: warping losses, direct optimization, \
             TUM dataset tools, and depth-map post-processing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Pair RGB and depth listings by nearest timestamp
    Associate(AssociateArgs),
    /// Score predicted depth maps against ground truth
    Eval(EvalArgs),
    /// Combine or filter predicted depth maps
    Postprocess(PostprocessArgs),
    /// Optimize disparity and pose for a synthetic frame pair
    Optimize(OptimizeArgs),
    /// Rank filter configurations by resulting RMSE
    FilterStudy(FilterStudyArgs),
    /// Generate and export a synthetic scene
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct AssociateArgs {
    /// RGB listing file ("timestamp path" lines)
    #[arg(long)]
    pub rgb: PathBuf,
    /// Depth listing file
    #[arg(long)]
    pub depth: PathBuf,
    /// Maximum timestamp difference in seconds
    #[arg(long, default_value_t = 0.02)]
    pub max_dt: f64,
    /// Output file for the pairs (stdout when omitted)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted depth maps (.dmap or 16-bit .png)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth depth maps
    #[arg(long)]
    pub gt: PathBuf,
    /// Divisor for 16-bit PNG depth values
    #[arg(long, default_value_t = DEFAULT_DEPTH_DIVISOR)]
    pub divisor: f64,
    /// Disable median scaling of predictions
    #[arg(long)]
    pub no_median_scale: bool,
    #[arg(long, default_value_t = 0.1)]
    pub min_depth: f64,
    #[arg(long, default_value_t = 10.0)]
    pub max_depth: f64,
    /// Also write machine-readable records to this file
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct PostprocessArgs {
    /// elwf (flip-ensemble average), godard (edge-band blend), or filter
    #[arg(long)]
    pub mode: String,
    /// Primary input map
    #[arg(long)]
    pub input: PathBuf,
    /// Second map: for elwf the flipped-domain estimate, for godard the
    /// already re-aligned flipped-input estimate
    #[arg(long)]
    pub second: Option<PathBuf>,
    /// Filter kind for --mode filter: median or max
    #[arg(long)]
    pub filter: Option<String>,
    /// Filter window side (odd, >= 3)
    #[arg(long)]
    pub size: Option<usize>,
    /// Value space for combining: disparity (convert, combine, convert back)
    /// or depth (combine stored values directly)
    #[arg(long, default_value = "disparity")]
    pub space: String,
    #[arg(long, default_value_t = DEFAULT_DEPTH_DIVISOR)]
    pub divisor: f64,
    /// Output map path (.dmap or .png)
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct OptimizeArgs {
    /// key = value config file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneFlags,
    /// Gradient steps to run
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// constant or step (step decays by --decay-factor every --decay-every)
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// upsample (per-level disparity upsampled to input resolution) or
    /// native (each level warped at its own resolution)
    #[arg(long)]
    pub strategy: Option<String>,
    /// Attach the scene's source-view depth so the 3D alignment terms run
    #[arg(long)]
    pub use_3d: Option<bool>,
    /// "gt" or six comma-separated pose parameters rx,ry,rz,tx,ty,tz
    #[arg(long)]
    pub init_pose: Option<String>,
    /// "gt" or a constant disparity value
    #[arg(long)]
    pub init_disparity: Option<String>,
    /// Directory for trace.csv, final maps, and pose
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct FilterStudyArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated configurations, e.g. "none,max-15,median-35"
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = DEFAULT_DEPTH_DIVISOR)]
    pub divisor: f64,
    #[arg(long)]
    pub no_median_scale: bool,
    #[arg(long, default_value_t = 0.1)]
    pub min_depth: f64,
    #[arg(long, default_value_t = 10.0)]
    pub max_depth: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// key = value config file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneFlags,
    /// Directory for the exported scene files
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Scene parameters shared by `optimize` and `synth`.
#[derive(Args)]
pub struct SceneFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// plane, slant, or steps
    #[arg(long)]
    pub profile: Option<String>,
    /// Depth of the fronto-parallel plane
    #[arg(long)]
    pub plane_z: Option<f64>,
    /// Plane normal nx,ny,nz for the slant profile
    #[arg(long)]
    pub slant_normal: Option<String>,
    /// Plane offset d (n . X = d) for the slant profile
    #[arg(long)]
    pub slant_d: Option<f64>,
    /// Comma-separated band depths for the steps profile
    #[arg(long)]
    pub steps_depths: Option<String>,
    /// Camera motion rx,ry,rz,tx,ty,tz (angle-axis radians, meters)
    #[arg(long)]
    pub motion: Option<String>,
    /// "default" or fx,fy,cx,cy
    #[arg(long)]
    pub intrinsics: Option<String>,
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if err.is_numerical() { 3 } else { 2 })
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Associate(args) => cmd_associate(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Postprocess(args) => cmd_postprocess(&args),
        Command::Optimize(args) => cmd_optimize(&args),
        Command::FilterStudy(args) => cmd_filter_study(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

// ---- config files ----------------------------------------------------

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored, duplicate keys are an error.
pub fn parse_config(text: &str, origin: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if map
            .insert(key.clone(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::format(
                origin,
                format!("line {}: duplicate key {key:?}", lineno + 1),
            ));
        }
    }
    Ok(map)
}

struct Settings {
    map: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config(&text, p)?
            }
            None => HashMap::new(),
        };
        Ok(Self { map })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("bad value {v:?} for {key}"))
            }),
        }
    }
}

/// Flag beats config beats default.
fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

fn pick_opt<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

fn parse_floats(text: &str, what: &str, n: usize) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let values =
        values.map_err(|_| Error::Config(format!("{what}: bad number list {text:?}")))?;
    if n != 0 && values.len() != n {
        return Err(Error::Config(format!(
            "{what}: expected {n} comma-separated numbers, got {}",
            values.len()
        )));
    }
    Ok(values)
}

fn parse_motion(text: &str) -> Result<RigidTransform> {
    let v = parse_floats(text, "motion", 6)?;
    RigidTransform::new(
        Vector3::new(v[0], v[1], v[2]),
        Vector3::new(v[3], v[4], v[5]),
    )
}

/// Merged scene description plus the raw strings needed to echo a config.
struct SceneSettings {
    spec: SceneSpec,
    profile: String,
    motion: String,
    intrinsics: String,
}

fn scene_from(flags: &SceneFlags, cfg: &Settings) -> Result<SceneSettings> {
    let seed = pick(flags.seed, cfg.parsed("seed")?, 7);
    let width = pick(flags.width, cfg.parsed("width")?, 64);
    let height = pick(flags.height, cfg.parsed("height")?, 48);
    let profile_name = pick(
        flags.profile.clone(),
        cfg.raw("profile").map(str::to_string),
        "plane".to_string(),
    );
    let motion_text = pick(
        flags.motion.clone(),
        cfg.raw("motion").map(str::to_string),
        "0.01,-0.008,0.005,0.02,0.01,-0.015".to_string(),
    );
    let intrinsics_text = pick(
        flags.intrinsics.clone(),
        cfg.raw("intrinsics").map(str::to_string),
        "default".to_string(),
    );

    let profile = match profile_name.as_str() {
        "plane" => DepthProfile::Plane {
            z: pick(flags.plane_z, cfg.parsed("plane_z")?, 2.0),
        },
        "slant" => {
            let normal_text = pick(
                flags.slant_normal.clone(),
                cfg.raw("slant_normal").map(str::to_string),
                "0.2,0.1,1.0".to_string(),
            );
            let n = parse_floats(&normal_text, "slant_normal", 3)?;
            DepthProfile::Slant {
                normal: Vector3::new(n[0], n[1], n[2]),
                d: pick(flags.slant_d, cfg.parsed("slant_d")?, 2.0),
            }
        }
        "steps" => {
            let depths_text = pick(
                flags.steps_depths.clone(),
                cfg.raw("steps_depths").map(str::to_string),
                "1.5,2.5,4.0".to_string(),
            );
            DepthProfile::Steps {
                depths: parse_floats(&depths_text, "steps_depths", 0)?,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown profile {other:?} (plane, slant, or steps)"
            )))
        }
    };
    let motion = parse_motion(&motion_text)?;
    let mut spec = SceneSpec::new(seed, width, height, profile, motion);
    if intrinsics_text != "default" {
        let k = parse_floats(&intrinsics_text, "intrinsics", 4)?;
        spec = spec.with_intrinsics(Intrinsics::new(k[0], k[1], k[2], k[3])?);
    }
    Ok(SceneSettings {
        spec,
        profile: profile_name,
        motion: motion_text,
        intrinsics: intrinsics_text,
    })
}

// ---- depth file helpers ----------------------------------------------

fn load_any_depth(path: &Path, divisor: f64) -> Result<DepthMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dmap") => load_depth_raw(path),
        Some("png") => load_depth_png(path, divisor),
        _ => Err(Error::format(
            path,
            "unsupported depth format (expected .dmap or .png)",
        )),
    }
}

fn save_any_depth(path: &Path, depth: &DepthMap, divisor: f64) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dmap") => save_depth_raw(path, depth),
        Some("png") => save_depth_png(path, depth, divisor),
        _ => Err(Error::format(
            path,
            "unsupported depth format (expected .dmap or .png)",
        )),
    }
}

/// Depth files in a directory, sorted by file name for determinism.
fn list_depth_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("dmap") | Some("png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InsufficientData {
            what: "depth maps in directory",
            needed: 1,
            available: 0,
        });
    }
    Ok(files)
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

// ---- commands ---------------------------------------------------------

pub fn cmd_associate(args: &AssociateArgs) -> Result<()> {
    let rgb_text =
        std::fs::read_to_string(&args.rgb).map_err(|e| Error::io(&args.rgb, e))?;
    let depth_text =
        std::fs::read_to_string(&args.depth).map_err(|e| Error::io(&args.depth, e))?;
    let rgb = parse_listing(&rgb_text, &args.rgb)?;
    let depth = parse_listing(&depth_text, &args.depth)?;
    let pairs = associate_frames(&rgb, &depth, args.max_dt)?;
    let text = format_association(&pairs);
    match &args.output {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    eprintln!(
        "{} of {} rgb frames paired (max_dt {})",
        pairs.len(),
        rgb.len(),
        args.max_dt
    );
    Ok(())
}

/// Loads pred/gt directories pairwise (sorted order) and scores each pair.
/// Predictions are resized to the ground-truth resolution with
/// nearest-neighbor; ground truth is never resized.
fn evaluate_directories(
    pred_dir: &Path,
    gt_dir: &Path,
    divisor: f64,
    opts: &MetricOptions,
    filter: Option<&FilterSpec>,
) -> Result<Vec<(String, MetricReport)>> {
    let preds = list_depth_files(pred_dir)?;
    let gts = list_depth_files(gt_dir)?;
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput {
            what: "evaluation inputs",
            reason: format!(
                "{} predictions vs {} ground-truth maps",
                preds.len(),
                gts.len()
            ),
        });
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(&gts) {
        let mut pred = load_any_depth(p, divisor)?;
        let gt = load_any_depth(g, divisor)?;
        if let Some(spec) = filter {
            pred = apply_filter(&pred, spec);
        }
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            pred = pred.resize_nearest(gt.width(), gt.height());
        }
        rows.push((file_label(p), depth_metrics(&pred, &gt, opts)?));
    }
    Ok(rows)
}

fn metric_options(no_median_scale: bool, min_depth: f64, max_depth: f64) -> MetricOptions {
    MetricOptions {
        median_scale: !no_median_scale,
        min_depth,
        max_depth,
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let opts = metric_options(args.no_median_scale, args.min_depth, args.max_depth);
    let mut rows = evaluate_directories(&args.pred, &args.gt, args.divisor, &opts, None)?;
    if let Some(mean) = aggregate_reports(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>()) {
        rows.push(("mean".to_string(), mean));
    }
    print!("{}", format_table(&rows));
    if let Some(path) = &args.json {
        std::fs::write(path, reports_json(&rows)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_space(space: &str) -> Result<bool> {
    match space {
        "disparity" => Ok(true),
        "depth" => Ok(false),
        other => Err(Error::Config(format!(
            "unknown space {other:?} (disparity or depth)"
        ))),
    }
}

fn parse_filter_spec(kind: Option<&str>, size: Option<usize>) -> Result<FilterSpec> {
    let kind = match kind {
        Some("median") | None => FilterKind::Median,
        Some("max") => FilterKind::Max,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown filter {other:?} (median or max)"
            )))
        }
    };
    FilterSpec::new(kind, size.unwrap_or(35))
}

pub fn cmd_postprocess(args: &PostprocessArgs) -> Result<()> {
    let input = load_any_depth(&args.input, args.divisor)?;
    let output = match args.mode.as_str() {
        "elwf" | "godard" => {
            let second_path = args.second.as_ref().ok_or_else(|| {
                Error::Config(format!("--mode {} needs --second", args.mode))
            })?;
            let second = load_any_depth(second_path, args.divisor)?;
            let as_disparity = parse_space(&args.space)?;
            // The combination operates in the network's native disparity
            // space by default; stored maps hold depth, so convert around it.
            let (a, b) = if as_disparity {
                (input.reciprocal(), second.reciprocal())
            } else {
                (input.clone(), second.clone())
            };
            let combined = match args.mode.as_str() {
                "elwf" => elwf_combine(&a, &b)?,
                _ => {
                    let blend = godard_postprocess(&a, &b)?;
                    if blend.narrow_fallback {
                        eprintln!(
                            "note: map narrower than 20 columns, plain averaging used"
                        );
                    }
                    blend.map
                }
            };
            if as_disparity {
                combined.reciprocal()
            } else {
                combined
            }
        }
        "filter" => {
            let spec = parse_filter_spec(args.filter.as_deref(), args.size)?;
            apply_filter(&input, &spec)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown mode {other:?} (elwf, godard, or filter)"
            )))
        }
    };
    save_any_depth(&args.output, &output, args.divisor)?;
    eprintln!("wrote {}", args.output.display());
    Ok(())
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<()> {
    let cfg = Settings::load(args.config.as_deref())?;
    let scene_settings = scene_from(&args.scene, &cfg)?;
    let scene = make_synthetic_scene(&scene_settings.spec)?;
    let intrinsics = scene_settings.spec.resolve_intrinsics();

    let steps = pick(args.steps, cfg.parsed("steps")?, 300);
    let step_size = pick(args.step_size, cfg.parsed("step_size")?, 2e-3);
    let schedule_name = pick(
        args.schedule.clone(),
        cfg.raw("schedule").map(str::to_string),
        "constant".to_string(),
    );
    let schedule = match schedule_name.as_str() {
        "constant" => Schedule::Constant,
        "step" => Schedule::StepDecay {
            every: pick(args.decay_every, cfg.parsed("decay_every")?, 100),
            factor: pick(args.decay_factor, cfg.parsed("decay_factor")?, 0.5),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown schedule {other:?} (constant or step)"
            )))
        }
    };
    let defaults = LossWeights::default();
    let weights = LossWeights {
        alpha: pick(args.alpha, cfg.parsed("alpha")?, defaults.alpha),
        beta: pick(args.beta, cfg.parsed("beta")?, defaults.beta),
        gamma: pick(args.gamma, cfg.parsed("gamma")?, defaults.gamma),
        omega: pick(args.omega, cfg.parsed("omega")?, defaults.omega),
    };
    let strategy_name = pick(
        args.strategy.clone(),
        cfg.raw("strategy").map(str::to_string),
        "upsample".to_string(),
    );
    let strategy = match strategy_name.as_str() {
        "upsample" => ScaleStrategy::UpsampleToInput,
        "native" => ScaleStrategy::NativePerLevel,
        other => {
            return Err(Error::Config(format!(
                "unknown strategy {other:?} (upsample or native)"
            )))
        }
    };
    let use_3d = pick(args.use_3d, cfg.parsed("use_3d")?, true);

    let init_pose_text = pick(
        args.init_pose.clone(),
        cfg.raw("init_pose").map(str::to_string),
        "gt".to_string(),
    );
    let init_pose = if init_pose_text == "gt" {
        scene.gt_pose
    } else {
        parse_motion(&init_pose_text)?
    };
    let init_disp_text = pick(
        args.init_disparity.clone(),
        cfg.raw("init_disparity").map(str::to_string),
        "gt".to_string(),
    );
    let init_disparity = if init_disp_text == "gt" {
        scene.gt_depth.reciprocal()
    } else {
        let v: f64 = init_disp_text
            .parse()
            .map_err(|_| Error::Config(format!("bad init_disparity {init_disp_text:?}")))?;
        DepthMap::constant(scene.target.width(), scene.target.height(), v)?
    };

    let mut problem = PairProblem::new(
        scene.target.clone(),
        scene.source.clone(),
        intrinsics,
        &init_disparity,
        &init_pose,
    )?
    .with_weights(weights)
    .with_strategy(strategy);
    if use_3d {
        problem = problem.with_source_depth(scene.source_depth.clone())?;
    }

    let outcome = optimize_pair(&mut problem, steps, step_size, &schedule)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let trace_path = args.out_dir.join("trace.csv");
    std::fs::write(&trace_path, trace_csv(&outcome.trace))
        .map_err(|e| Error::io(&trace_path, e))?;
    save_depth_raw(&args.out_dir.join("final_disparity.dmap"), &outcome.disparity)?;
    save_depth_raw(
        &args.out_dir.join("final_depth.dmap"),
        &outcome.disparity.reciprocal(),
    )?;
    let p = {
        let r = outcome.pose.rotation;
        let t = outcome.pose.translation;
        format!("{} {} {} {} {} {}\n", r.x, r.y, r.z, t.x, t.y, t.z)
    };
    let pose_path = args.out_dir.join("final_pose.txt");
    std::fs::write(&pose_path, p).map_err(|e| Error::io(&pose_path, e))?;

    let rot_err_deg = outcome.pose.rotation_angle_to(&scene.gt_pose).to_degrees();
    let t_gt = scene.gt_pose.translation;
    let t_err = (outcome.pose.translation - t_gt).norm();
    let t_rel = if t_gt.norm() > 0.0 {
        t_err / t_gt.norm()
    } else {
        t_err
    };
    println!(
        "loss {:.6e} -> {:.6e} in {} steps; pose error {:.4} deg, {:.3}% translation",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.trace.len() - 1,
        rot_err_deg,
        100.0 * t_rel
    );
    println!("outputs in {}", args.out_dir.display());

    if let RunStatus::Diverged { step } = outcome.status {
        return Err(Error::Diverged {
            step,
            initial: outcome.initial_loss,
            current: outcome.final_loss,
        });
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<Option<FilterSpec>>> {
    let mut grid = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part == "none" {
            grid.push(None);
            continue;
        }
        let (kind, size) = part.split_once('-').ok_or_else(|| {
            Error::Config(format!("bad grid entry {part:?} (none, median-N, max-N)"))
        })?;
        let size: usize = size
            .parse()
            .map_err(|_| Error::Config(format!("bad filter size in {part:?}")))?;
        let kind = match kind {
            "median" => FilterKind::Median,
            "max" => FilterKind::Max,
            other => return Err(Error::Config(format!("unknown filter kind {other:?}"))),
        };
        grid.push(Some(FilterSpec::new(kind, size)?));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty filter grid".into()));
    }
    Ok(grid)
}

pub fn cmd_filter_study(args: &FilterStudyArgs) -> Result<()> {
    let opts = metric_options(args.no_median_scale, args.min_depth, args.max_depth);
    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => default_filter_grid(),
    };
    let mut rows: Vec<(String, MetricReport)> = Vec::with_capacity(grid.len());
    for entry in &grid {
        let label = match entry {
            None => "none".to_string(),
            Some(spec) => spec.to_string(),
        };
        let frame_rows =
            evaluate_directories(&args.pred, &args.gt, args.divisor, &opts, entry.as_ref())?;
        let reports: Vec<MetricReport> = frame_rows.iter().map(|(_, r)| *r).collect();
        let mean = aggregate_reports(&reports).expect("directories are non-empty");
        rows.push((label, mean));
    }
    rows.sort_by(|a, b| a.1.rmse.total_cmp(&b.1.rmse).then(a.0.cmp(&b.0)));
    print!("{}", format_table(&rows));
    println!("best by RMSE: {}", rows[0].0);
    if let Some(path) = &args.json {
        std::fs::write(path, reports_json(&rows)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = Settings::load(args.config.as_deref())?;
    let settings = scene_from(&args.scene, &cfg)?;
    let scene = make_synthetic_scene(&settings.spec)?;
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    save_image(&dir.join("target.png"), &scene.target)?;
    save_image(&dir.join("source.png"), &scene.source)?;
    save_depth_raw(&dir.join("gt_depth.dmap"), &scene.gt_depth)?;
    save_depth_raw(&dir.join("source_depth.dmap"), &scene.source_depth)?;

    let r = scene.gt_pose.rotation;
    let t = scene.gt_pose.translation;
    let pose_path = dir.join("gt_pose.txt");
    std::fs::write(
        &pose_path,
        format!("{} {} {} {} {} {}\n", r.x, r.y, r.z, t.x, t.y, t.z),
    )
    .map_err(|e| Error::io(&pose_path, e))?;

    let k = settings.spec.resolve_intrinsics();
    let k_path = dir.join("intrinsics.txt");
    std::fs::write(
        &k_path,
        format!("fx = {}\nfy = {}\ncx = {}\ncy = {}\n", k.fx, k.fy, k.cx, k.cy),
    )
    .map_err(|e| Error::io(&k_path, e))?;

    // Echo the full scene description in the format `optimize --config`
    // reads, so an exported scene can be re-optimized directly.
    let mut echo = String::new();
    let spec = &settings.spec;
    let _ = writeln!(echo, "seed = {}", spec.seed);
    let _ = writeln!(echo, "width = {}", spec.width);
    let _ = writeln!(echo, "height = {}", spec.height);
    let _ = writeln!(echo, "profile = {}", settings.profile);
    match &spec.profile {
        DepthProfile::Plane { z } => {
            let _ = writeln!(echo, "plane_z = {z}");
        }
        DepthProfile::Slant { normal, d } => {
            let _ = writeln!(echo, "slant_normal = {},{},{}", normal.x, normal.y, normal.z);
            let _ = writeln!(echo, "slant_d = {d}");
        }
        DepthProfile::Steps { depths } => {
            let list: Vec<String> = depths.iter().map(f64::to_string).collect();
            let _ = writeln!(echo, "steps_depths = {}", list.join(","));
        }
    }
    let _ = writeln!(echo, "motion = {}", settings.motion);
    if settings.intrinsics != "default" {
        let _ = writeln!(echo, "intrinsics = {}", settings.intrinsics);
    }
    let cfg_path = dir.join("scene.cfg");
    std::fs::write(&cfg_path, echo).map_err(|e| Error::io(&cfg_path, e))?;

    println!(
        "scene {}x{} ({}), {:.1}% of pixels in bounds; files in {}",
        spec.width,
        spec.height,
        settings.profile,
        100.0 * scene.in_bounds_fraction,
        dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("arguments parse")
    }

    #[test]
    fn subcommands_parse_with_their_flags() {
        parse(&[
            "warpdepth",
            "associate",
            "--rgb",
            "rgb.txt",
            "--depth",
            "depth.txt",
            "--max-dt",
            "0.01",
        ]);
        parse(&["warpdepth", "eval", "--pred", "p", "--gt", "g", "--no-median-scale"]);
        parse(&[
            "warpdepth",
            "postprocess",
            "--mode",
            "filter",
            "--input",
            "a.dmap",
            "--filter",
            "median",
            "--size",
            "35",
            "--output",
            "out.dmap",
        ]);
        parse(&["warpdepth", "optimize", "--out-dir", "runs", "--steps", "5"]);
        parse(&["warpdepth", "filter-study", "--pred", "p", "--gt", "g"]);
        parse(&["warpdepth", "synth", "--out-dir", "scene", "--profile", "steps"]);
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert!(Cli::try_parse_from(["warpdepth", "eval", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["warpdepth", "nonsense"]).is_err());
    }

    #[test]
    fn config_files_parse_and_reject_duplicates() {
        let origin = PathBuf::from("run.cfg");
        let map = parse_config("# comment\nsteps = 40\n\nseed = 9 # inline\n", &origin).unwrap();
        assert_eq!(map["steps"], "40");
        assert_eq!(map["seed"], "9");
        assert!(parse_config("a = 1\na = 2\n", &origin).is_err());
        assert!(parse_config("justakey\n", &origin).is_err());
    }

    #[test]
    fn flags_override_config_values() {
        let cfg = Settings {
            map: parse_config("steps = 40\n", &PathBuf::from("x")).unwrap(),
        };
        assert_eq!(pick(Some(10), cfg.parsed("steps").unwrap(), 300), 10);
        assert_eq!(pick(None, cfg.parsed("steps").unwrap(), 300), 40);
        assert_eq!(pick::<usize>(None, cfg.parsed("missing").unwrap(), 300), 300);
    }

    #[test]
    fn motion_strings_parse_into_transforms() {
        let t = parse_motion("0.1, -0.2, 0.05, 1, 2, 3").unwrap();
        assert_eq!(t.rotation, Vector3::new(0.1, -0.2, 0.05));
        assert_eq!(t.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!(parse_motion("1,2,3").is_err());
        assert!(parse_motion("a,b,c,d,e,f").is_err());
    }

    #[test]
    fn grid_strings_parse_into_filter_specs() {
        let grid = parse_grid("none,max-15,median-35").unwrap();
        assert_eq!(grid.len(), 3);
        assert!(grid[0].is_none());
        assert_eq!(grid[1], Some(FilterSpec::max(15).unwrap()));
        assert_eq!(grid[2], Some(FilterSpec::median(35).unwrap()));
        assert!(parse_grid("median-4").is_err(), "even size rejected");
        assert!(parse_grid("blur-3").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn associate_command_writes_pairs_file() {
        let dir = tempdir().unwrap();
        let rgb = dir.path().join("rgb.txt");
        let depth = dir.path().join("depth.txt");
        std::fs::write(&rgb, "# rgb\n1.0 rgb/a.png\n2.0 rgb/b.png\n").unwrap();
        std::fs::write(&depth, "# depth\n1.005 depth/a.png\n2.5 depth/b.png\n").unwrap();
        let out = dir.path().join("pairs.txt");
        cmd_associate(&AssociateArgs {
            rgb,
            depth,
            max_dt: 0.02,
            output: Some(out.clone()),
        })
        .unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, "1 rgb/a.png 1.005 depth/a.png\n");
    }

    #[test]
    fn missing_listing_reports_the_path() {
        let err = cmd_associate(&AssociateArgs {
            rgb: PathBuf::from("/nonexistent/rgb.txt"),
            depth: PathBuf::from("/nonexistent/depth.txt"),
            max_dt: 0.02,
            output: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/rgb.txt"));
    }

    #[test]
    fn eval_scores_identical_directories_perfectly() {
        let dir = tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&gt).unwrap();
        let map = DepthMap::from_values(
            4,
            4,
            (0..16).map(|i| 1.0 + 0.1 * i as f64).collect(),
        )
        .unwrap();
        save_depth_raw(&pred.join("f0.dmap"), &map).unwrap();
        save_depth_raw(&gt.join("f0.dmap"), &map).unwrap();
        let rows = evaluate_directories(
            &pred,
            &gt,
            DEFAULT_DEPTH_DIVISOR,
            &MetricOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].1.rmse, 0.0);
        assert_eq!(rows[0].1.delta1, 1.0);
    }

    #[test]
    fn eval_rejects_count_mismatch_and_empty_dirs() {
        let dir = tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&gt).unwrap();
        let map = DepthMap::constant(3, 3, 1.0).unwrap();
        save_depth_raw(&pred.join("a.dmap"), &map).unwrap();
        assert!(matches!(
            evaluate_directories(&pred, &gt, 5000.0, &MetricOptions::default(), None),
            Err(Error::InsufficientData { .. })
        ));
        save_depth_raw(&gt.join("a.dmap"), &map).unwrap();
        save_depth_raw(&gt.join("b.dmap"), &map).unwrap();
        assert!(matches!(
            evaluate_directories(&pred, &gt, 5000.0, &MetricOptions::default(), None),
            Err(Error::InvalidInput { .. })
        ));
    }

    #[test]
    fn postprocess_elwf_of_a_map_and_its_flip_is_identity() {
        let dir = tempdir().unwrap();
        let map = DepthMap::from_values(
            6,
            4,
            (0..24).map(|i| 1.0 + 0.2 * (i % 7) as f64).collect(),
        )
        .unwrap();
        let a = dir.path().join("a.dmap");
        let b = dir.path().join("b.dmap");
        let out = dir.path().join("out.dmap");
        save_depth_raw(&a, &map).unwrap();
        save_depth_raw(&b, &map.flip_horizontal()).unwrap();
        cmd_postprocess(&PostprocessArgs {
            mode: "elwf".into(),
            input: a.clone(),
            second: Some(b),
            filter: None,
            size: None,
            space: "disparity".into(),
            divisor: DEFAULT_DEPTH_DIVISOR,
            output: out.clone(),
        })
        .unwrap();
        // f32 storage absorbs the double-reciprocal rounding dust
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(&a).unwrap(),
            "byte-identical output"
        );
    }

    #[test]
    fn synth_then_optimize_runs_from_the_echoed_config() {
        let dir = tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        cmd_synth(&SynthArgs {
            config: None,
            scene: SceneFlags {
                seed: Some(3),
                width: Some(16),
                height: Some(16),
                profile: None,
                plane_z: None,
                slant_normal: None,
                slant_d: None,
                steps_depths: None,
                motion: None,
                intrinsics: None,
            },
            out_dir: scene_dir.clone(),
        })
        .unwrap();
        for name in [
            "target.png",
            "source.png",
            "gt_depth.dmap",
            "source_depth.dmap",
            "gt_pose.txt",
            "intrinsics.txt",
            "scene.cfg",
        ] {
            assert!(scene_dir.join(name).exists(), "{name} missing");
        }

        let run_dir = dir.path().join("run");
        cmd_optimize(&OptimizeArgs {
            config: Some(scene_dir.join("scene.cfg")),
            scene: SceneFlags {
                seed: None,
                width: None,
                height: None,
                profile: None,
                plane_z: None,
                slant_normal: None,
                slant_d: None,
                steps_depths: None,
                motion: None,
                intrinsics: None,
            },
            steps: Some(2),
            step_size: Some(1e-4),
            schedule: None,
            decay_every: None,
            decay_factor: None,
            alpha: None,
            beta: None,
            gamma: None,
            omega: Some(0.0),
            strategy: None,
            use_3d: Some(false),
            init_pose: None,
            init_disparity: Some("0.6".into()),
            out_dir: run_dir.clone(),
        })
        .unwrap();
        let trace = std::fs::read_to_string(run_dir.join("trace.csv")).unwrap();
        assert!(trace.starts_with(
            "step,reconstruction,ssim,smooth0,smooth1,smooth2,smooth3,loss3d0"
        ));
        assert_eq!(trace.lines().count(), 1 + 3, "header plus steps+1 rows");
        assert!(run_dir.join("final_depth.dmap").exists());
        assert!(run_dir.join("final_pose.txt").exists());
    }

    #[test]
    fn filter_study_with_single_none_entry_matches_eval() {
        let dir = tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&gt).unwrap();
        let gt_map = DepthMap::constant(8, 8, 2.0).unwrap();
        let mut vals = vec![2.0; 64];
        vals[10] = 2.5;
        let pred_map = DepthMap::from_values(8, 8, vals).unwrap();
        save_depth_raw(&pred.join("f.dmap"), &pred_map).unwrap();
        save_depth_raw(&gt.join("f.dmap"), &gt_map).unwrap();

        let opts = metric_options(true, 0.1, 10.0);
        let direct =
            evaluate_directories(&pred, &gt, 5000.0, &opts, None).unwrap()[0].1;
        let through_grid = evaluate_directories(
            &pred,
            &gt,
            5000.0,
            &opts,
            parse_grid("none").unwrap()[0].as_ref(),
        )
        .unwrap()[0]
            .1;
        assert_eq!(direct, through_grid);
    }
}
