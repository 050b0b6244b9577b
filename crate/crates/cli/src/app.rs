use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use depthcal::losses::LossWeights;
use depthcal::metrics::{
    depth_metrics, fov_error_stats, shape_metrics, DepthMetrics, FovAxis, ShapeMetrics, DEFAULT_F1_THRESHOLDS,
};
use depthcal::refine::{refine_joint, refine_report, RefineConfig, RefineState, RefineSummary};
use depthcal::synthetic::{make_camera, perturb, render_depth, sample_constraints, NoiseSpec, SceneSpec};
use depthcal::{
    field_from_intrinsics, solve_minimal, solve_overdetermined, solve_robust, unproject_depth_map,
    unproject_with_field, CanonicalCamera, DepthMap, Intrinsics, LmConfig, PointCloud, RobustLoss, SolveReport,
    SolverParams,
};

use crate::docs::{
    constraints_to_json, parse_constraints, parse_field, parse_intrinsics, to_json, FieldDocument, IntrinsicsDocument,
};
use crate::error::{CliError, CliResult};
use crate::pfm::{read_pfm, write_pfm};
use crate::ply::{write_ply, PlyFormat};

#[derive(Debug, Parser)]
#[command(
    name = "depthcal",
    version,
    about = "Camera intrinsics from metric depth and known distances"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover fx, fy, cx, cy from a depth map and distance constraints.
    Calibrate(CalibrateArgs),
    /// Turn a depth map into a PLY point cloud.
    Unproject(UnprojectArgs),
    /// Depth, FoV and shape metrics of a prediction against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic scene and sample distance constraints.
    Synth(SynthArgs),
    /// Jointly refine a depth map and intrinsics against ground truth.
    Refine(RefineArgs),
    /// Write the incidence field of a camera.
    Field(FieldArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Depth map (PFM).
    pub depth: PathBuf,
    /// Constraint records (JSON array).
    pub constraints: PathBuf,
    /// Initial FoV in degrees across the longer image side.
    #[arg(long, default_value_t = 60.0)]
    pub init_fov: f64,
    /// Least squares followed by a Huber pass (needs more than 4 constraints).
    #[arg(long)]
    pub robust: bool,
    /// Where to write the recovered intrinsics.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UnprojectArgs {
    pub depth: PathBuf,
    #[arg(long, required_unless_present = "field", conflicts_with = "field")]
    pub intrinsics: Option<PathBuf>,
    /// Incidence field document instead of intrinsics.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Binary little-endian PLY instead of ASCII.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub pred_depth: PathBuf,
    pub gt_depth: PathBuf,
    #[arg(long, requires = "gt_intrinsics")]
    pub pred_intrinsics: Option<PathBuf>,
    #[arg(long, requires = "pred_intrinsics")]
    pub gt_intrinsics: Option<PathBuf>,
    /// Ignore pixels whose ground-truth depth exceeds this (meters).
    #[arg(long, default_value_t = f64::INFINITY)]
    pub cap: f64,
    /// F1 thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_F1_THRESHOLDS.to_vec())]
    pub f1_thresholds: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene document (JSON).
    pub scene: PathBuf,
    /// Seed for a random camera, or an intrinsics document.
    #[arg(long)]
    pub camera: String,
    /// Image size for a random camera.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    /// FoV range in degrees for a random camera.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [40.0, 120.0])]
    pub fov_range: Vec<f64>,
    /// Principal point jitter in pixels for a random camera.
    #[arg(long, default_value_t = 20.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 4)]
    pub constraints: usize,
    /// Relative (log-normal) noise on distances.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Relative (log-normal) noise on depths.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    /// Seed for constraint sampling and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.2)]
    pub min_ratio: f64,
    /// Writes PREFIX_depth.pfm, PREFIX_intrinsics.json, PREFIX_constraints.json.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Initial depth map (PFM).
    pub depth: PathBuf,
    pub gt_depth: PathBuf,
    pub gt_intrinsics: PathBuf,
    /// Initial FoV in degrees across the longer image side.
    #[arg(long, default_value_t = 60.0)]
    pub init_fov: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, num_args = 4, value_names = ["ALPHA", "BETA", "GAMMA", "LAMBDA"], allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    /// Stop once a step lowers the loss by less than this.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_depth: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_theta: f64,
    /// Writes PREFIX_depth.pfm, PREFIX_intrinsics.json, PREFIX_trace.csv.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(&a),
        Command::Unproject(a) => unproject(&a),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Refine(a) => refine(&a),
        Command::Field(a) => field(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::at(path, e))
}

pub fn read_depth(path: &Path) -> CliResult<DepthMap> {
    let f = fs::File::open(path).map_err(|e| CliError::at(path, e))?;
    read_pfm(&mut BufReader::new(f)).map_err(|e| CliError::at(path, e))
}

fn read_intrinsics(path: &Path) -> CliResult<Intrinsics> {
    parse_intrinsics(&read_text(path)?).map_err(|e| CliError::at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::at(path, e))
}

fn write_depth(path: &Path, d: &DepthMap) -> CliResult<()> {
    let mut buf = Vec::new();
    write_pfm(&mut buf, d).map_err(|e| CliError::at(path, e))?;
    write_file(path, &buf)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_dims(what: &str, d: &DepthMap, w: usize, h: usize) -> CliResult<()> {
    if (d.width(), d.height()) != (w, h) {
        return Err(CliError::input(format!(
            "{what} is {}x{}, expected {w}x{h}",
            d.width(),
            d.height()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationOutput {
    intrinsics: IntrinsicsDocument,
    fov_x: f64,
    fov_y: f64,
    converged: bool,
    condition_warning: bool,
    iterations: usize,
    final_residual_norm: f64,
    singular_value_ratio: f64,
    alternatives: Vec<IntrinsicsDocument>,
}

fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let depth = read_depth(&a.depth)?;
    let cs =
        parse_constraints(&read_text(&a.constraints)?, Some(&depth)).map_err(|e| CliError::at(&a.constraints, e))?;
    let (w, h) = (depth.width(), depth.height());
    for (i, c) in cs.iter().enumerate() {
        for [u, v] in [c.p1(), c.p2()] {
            let inside = u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64;
            let integer = u.fract() == 0.0 && v.fract() == 0.0;
            if !inside || (integer && depth.get(u as usize, v as usize).is_none()) {
                return Err(CliError::input(format!(
                    "{}: constraint record {i}: pixel ({u}, {v}) is not a valid pixel of the depth map",
                    a.constraints.display()
                )));
            }
        }
    }
    if cs.len() < 4 {
        return Err(CliError::input(format!(
            "need at least 4 constraints, got {}",
            cs.len()
        )));
    }
    let init = SolverParams::from_fov(a.init_fov, a.init_fov, w, h)?;
    let cfg = LmConfig::default();
    let report: SolveReport = if a.robust {
        solve_robust(&cs, init, w, h, &cfg)?
    } else if cs.len() == 4 {
        solve_minimal(&cs, init, w, h, &cfg)?
    } else {
        solve_overdetermined(&cs, init, RobustLoss::Squared, w, h, &cfg)?
    };
    let k = report.intrinsics;
    let out = CalibrationOutput {
        intrinsics: IntrinsicsDocument::from(&k),
        fov_x: k.fov_x(),
        fov_y: k.fov_y(),
        converged: report.converged,
        condition_warning: report.condition_warning,
        iterations: report.iterations,
        final_residual_norm: report.final_residual_norm,
        singular_value_ratio: report.singular_value_ratio,
        alternatives: report.alternatives.iter().map(IntrinsicsDocument::from).collect(),
    };
    if let Some(p) = &a.out {
        write_file(p, to_json(&out.intrinsics).as_bytes())?;
    }
    print!("{}", to_json(&out));
    if report.condition_warning {
        eprintln!(
            "warning: ill-conditioned or ambiguous solution ({} alternative solutions)",
            report.alternatives.len()
        );
    }
    if !report.converged {
        return Err(CliError::NonConvergence(format!(
            "stopped after {} iterations with residual norm {:e}",
            report.iterations, report.final_residual_norm
        )));
    }
    Ok(())
}

fn unproject(a: &UnprojectArgs) -> CliResult<()> {
    let depth = read_depth(&a.depth)?;
    let cloud: PointCloud = if let Some(p) = &a.intrinsics {
        let k = read_intrinsics(p)?;
        check_dims("depth map", &depth, k.width(), k.height())?;
        unproject_depth_map(&k, &depth)?
    } else {
        let p = a.field.as_ref().expect("clap enforces one camera source");
        let f = parse_field(&read_text(p)?).map_err(|e| CliError::at(p, e))?;
        check_dims("depth map", &depth, f.width(), f.height())?;
        unproject_with_field(&f, &depth)?
    };
    let format = if a.binary {
        PlyFormat::BinaryLittleEndian
    } else {
        PlyFormat::Ascii
    };
    let mut buf = Vec::new();
    write_ply(&mut buf, &cloud, format).map_err(|e| CliError::at(&a.out, e))?;
    write_file(&a.out, &buf)
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub depth: DepthMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fov_error_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fov_error_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeMetrics>,
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let pred = read_depth(&a.pred_depth)?;
    let gt = read_depth(&a.gt_depth)?;
    check_dims("predicted depth", &pred, gt.width(), gt.height())?;
    if !(a.cap > 0.0) {
        return Err(CliError::input(format!("--cap must be positive, got {}", a.cap)));
    }
    let mut out = EvalOutput {
        depth: depth_metrics(&pred, &gt, a.cap)?,
        fov_error_x: None,
        fov_error_y: None,
        shape: None,
    };
    if let (Some(pp), Some(gp)) = (&a.pred_intrinsics, &a.gt_intrinsics) {
        let kp = read_intrinsics(pp)?;
        let kg = read_intrinsics(gp)?;
        check_dims("predicted depth", &pred, kp.width(), kp.height())?;
        check_dims("ground-truth depth", &gt, kg.width(), kg.height())?;
        out.fov_error_x = Some(fov_error_stats(&[kp], &[kg], FovAxis::X)?.mean);
        out.fov_error_y = Some(fov_error_stats(&[kp], &[kg], FovAxis::Y)?.mean);
        let cp = unproject_depth_map(&kp, &pred)?;
        let cg = unproject_depth_map(&kg, &gt)?;
        out.shape = Some(shape_metrics(&cp, &cg, &a.f1_thresholds)?);
    }
    emit(a.out.as_deref(), &to_json(&out))
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let scene: SceneSpec = serde_json::from_str(&read_text(&a.scene)?)
        .map_err(|e| CliError::at(&a.scene, format!("scene document: {e}")))?;
    scene.validate().map_err(|e| CliError::at(&a.scene, e))?;
    let k = match a.camera.parse::<u64>() {
        Ok(seed) => make_camera(seed, a.width, a.height, (a.fov_range[0], a.fov_range[1]), a.jitter)?,
        Err(_) => read_intrinsics(Path::new(&a.camera))?,
    };
    // Round to what the PFM file will hold, so constraints agree with it.
    let depth = render_depth(&scene, &k)?;
    let depth = DepthMap::new(
        depth.width(),
        depth.height(),
        depth.values().iter().map(|d| *d as f32 as f64).collect(),
        depth.valid().to_vec(),
    )?;
    let (cs, depth) = if a.constraints > 0 {
        let cs = sample_constraints(&depth, &k, a.constraints, a.seed, a.min_ratio)?;
        let noise = NoiseSpec {
            depth_sigma_rel: a.depth_noise,
            distance_sigma_rel: a.noise,
            seed: a.seed,
        };
        perturb(&cs, &depth, &noise)?
    } else {
        let noise = NoiseSpec {
            depth_sigma_rel: a.depth_noise,
            distance_sigma_rel: 0.0,
            seed: a.seed,
        };
        perturb(&[], &depth, &noise)?
    };
    let p = &a.out_prefix;
    write_depth(Path::new(&format!("{p}_depth.pfm")), &depth)?;
    write_file(
        Path::new(&format!("{p}_intrinsics.json")),
        to_json(&IntrinsicsDocument::from(&k)).as_bytes(),
    )?;
    let mut text = constraints_to_json(&cs);
    text.push('\n');
    write_file(Path::new(&format!("{p}_constraints.json")), text.as_bytes())
}

fn refine(a: &RefineArgs) -> CliResult<()> {
    let init_depth = read_depth(&a.depth)?;
    let dstar = read_depth(&a.gt_depth)?;
    let kstar = read_intrinsics(&a.gt_intrinsics)?;
    check_dims("ground-truth depth", &dstar, kstar.width(), kstar.height())?;
    check_dims("initial depth", &init_depth, kstar.width(), kstar.height())?;
    let weights = match &a.weights {
        Some(w) => LossWeights {
            alpha: w[0],
            beta: w[1],
            gamma: w[2],
            lambda: w[3],
        },
        None => LossWeights::default(),
    };
    let cfg = RefineConfig {
        weights,
        lr_depth: a.lr_depth,
        lr_theta: a.lr_theta,
        max_steps: a.steps,
        tol: a.tol,
        ..RefineConfig::default()
    };
    cfg.validate()?;
    let cano = CanonicalCamera::with_fov(a.init_fov, kstar.width(), kstar.height())?;
    let init = RefineState::from_canonical(&init_depth, &cano)?;
    let vstar = field_from_intrinsics(&kstar);
    let (state, trace) = refine_joint(init, &dstar, &vstar, &cano, &cfg)?;

    // Pixels invalid in the input stay invalid and keep their stored value.
    let values = state
        .log_depth
        .iter()
        .zip(init_depth.values())
        .zip(init_depth.valid())
        .map(|((l, d0), ok)| if *ok { l.exp() } else { *d0 })
        .collect();
    let depth = DepthMap::new(state.width, state.height, values, init_depth.valid().to_vec())?;
    let k = state.intrinsics()?;
    let p = &a.out_prefix;
    write_depth(Path::new(&format!("{p}_depth.pfm")), &depth)?;
    write_file(
        Path::new(&format!("{p}_intrinsics.json")),
        to_json(&IntrinsicsDocument::from(&k)).as_bytes(),
    )?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    write_file(Path::new(&format!("{p}_trace.csv")), csv.as_bytes())?;
    let summary: RefineSummary = refine_report(&state, &dstar, &kstar)?;
    print!("{}", to_json(&summary));
    Ok(())
}

fn field(a: &FieldArgs) -> CliResult<()> {
    let k = read_intrinsics(&a.intrinsics)?;
    emit(
        a.out.as_deref(),
        &to_json(&FieldDocument::from(&field_from_intrinsics(&k))),
    )
}
