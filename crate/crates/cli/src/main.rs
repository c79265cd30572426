//! `wgicp`: registration, odometry, training, gradient checks and rejection
//! sweeps from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use wgicp::covariance::{estimate_covariances, CovarianceParams};
use wgicp::gradcheck::{run_gradcheck, GradcheckConfig};
use wgicp::io_kitti::{format_pose, list_scans, read_cloud, read_poses, write_trajectory, PoseFile};
use wgicp::odometry::{format_report, format_timings, kitti_errors, metric_value, preprocess, run_sequence, Backend, InitialGuess, OdometryConfig, OdometryRun};
use wgicp::registration::{align_gicp, align_icp, align_wgicp, LmParams, RegistrationError, WgicpProblem};
use wgicp::weights::{format_loss_history, train, TrainConfig, TrainPair, WeightModel, WeightsError};
use wgicp::{geometry::voxel_downsample, PointCloud};

/// Tolerance on the maximum relative gradient error.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "wgicp", version, about = "Weighted GICP registration and lidar odometry")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key=value` file of defaults; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align a source cloud to a target cloud.
    Register(RegisterArgs),
    /// Run odometry over a KITTI-style sequence directory.
    Odometry(OdometryArgs),
    /// Train the weight model on a sequence with ground truth.
    Train(TrainArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run odometry at several rejection ratios.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Icp,
    Gicp,
    Wgicp,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Icp => Backend::Icp,
            BackendArg::Gicp => Backend::Gicp,
            BackendArg::Wgicp => Backend::Wgicp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitialArg {
    Identity,
    ConstantVelocity,
}

#[derive(Debug, Clone, Args)]
struct Preprocessing {
    /// Voxel size in meters.
    #[arg(long, default_value_t = 0.5)]
    voxel: f64,
    /// Neighbors per covariance estimate.
    #[arg(long, default_value_t = 20)]
    cov_k: usize,
    /// Soft-correspondence neighbors.
    #[arg(long, default_value_t = 4)]
    kd: usize,
    /// Soft-correspondence temperature in meters.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Solver iteration cap.
    #[arg(long, default_value_t = 64)]
    max_iter: usize,
}

impl Preprocessing {
    fn covariance(&self) -> CovarianceParams {
        CovarianceParams {
            k_neighbors: self.cov_k,
            ..Default::default()
        }
    }

    fn lines(&self, out: &mut Vec<(String, String)>) {
        push(out, "voxel", self.voxel);
        push(out, "cov-k", self.cov_k);
        push(out, "kd", self.kd);
        push(out, "temperature", self.temperature);
        push(out, "max-iter", self.max_iter);
    }
}

#[derive(Debug, Clone, Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendArg::Gicp)]
    backend: BackendArg,
    #[command(flatten)]
    prep: Preprocessing,
    /// Write the pose line here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SequenceArgs {
    /// Sequence directory with `velodyne/*.bin` (or `*.bin`).
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth poses (default: `<data>/poses.txt` when present).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Calibration with a `Tr:` line (default: `<data>/calib.txt` when present).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendArg::Gicp)]
    backend: BackendArg,
    /// Weight model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InitialArg::Identity)]
    initial: InitialArg,
    #[command(flatten)]
    prep: Preprocessing,
}

#[derive(Debug, Clone, Args)]
struct OdometryArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    /// Fraction of lowest-weight points dropped before alignment.
    #[arg(long, default_value_t = 0.0)]
    rejection: f64,
    #[arg(long)]
    out_traj: Option<PathBuf>,
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Per-phase timings (default: `<out-report>.timing`).
    #[arg(long)]
    out_timing: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SweepArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    /// Comma-separated rejection ratios.
    #[arg(long, default_value = "0,0.25,0.5,0.75", value_delimiter = ',')]
    rejections: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    /// Sequence directory; consecutive frames form the training pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Unrolled solver iterations.
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Objective scale of the smooth step gate.
    #[arg(long, default_value_t = 1.0)]
    gate_scale: f64,
    #[arg(long, default_value = "model.ckpt")]
    out_model: PathBuf,
    /// Loss history (default: `<out-model>.loss`).
    #[arg(long)]
    out_loss: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init_model: Option<PathBuf>,
    #[command(flatten)]
    prep: Preprocessing,
}

#[derive(Debug, Clone, Args)]
struct GradcheckArgs {
    /// Points per cloud.
    #[arg(long, default_value_t = 50)]
    points: usize,
    /// Unrolled solver iterations.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 20)]
    problems: usize,
    #[arg(long, default_value_t = 4)]
    kd: usize,
    /// Check only the per-point weights, not the model parameters.
    #[arg(long)]
    weights_only: bool,
    #[arg(long, hide = true)]
    corrupt_adjoint: bool,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
enum Failure {
    Io(String),
    Diverged(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Diverged(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Diverged(m) | Failure::Check(m) => m,
        }
    }
}

fn io(e: impl std::fmt::Display) -> Failure {
    Failure::Io(e.to_string())
}

fn registration_failure(e: RegistrationError) -> Failure {
    match e {
        RegistrationError::Diverged { .. } | RegistrationError::SingularNormalEquations | RegistrationError::Numeric(_) => Failure::Diverged(e.to_string()),
        other => Failure::Io(other.to_string()),
    }
}

fn push(out: &mut Vec<(String, String)>, key: &str, value: impl std::fmt::Display) {
    out.push((key.to_string(), value.to_string()));
}

fn push_path(out: &mut Vec<(String, String)>, key: &str, value: &Option<PathBuf>) {
    let v = value.as_ref().map_or("none".to_string(), |p| p.display().to_string());
    out.push((key.to_string(), v));
}

fn backend_name(b: BackendArg) -> &'static str {
    match b {
        BackendArg::Icp => "icp",
        BackendArg::Gicp => "gicp",
        BackendArg::Wgicp => "wgicp",
    }
}

fn print_config(cli: &Cli) {
    let mut out = Vec::new();
    push(&mut out, "seed", cli.seed);
    push(&mut out, "threads", cli.threads.map_or("auto".to_string(), |t| t.to_string()));
    push_path(&mut out, "config", &cli.config);
    match &cli.command {
        Command::Register(a) => {
            push(&mut out, "command", "register");
            push(&mut out, "source", a.source.display());
            push(&mut out, "target", a.target.display());
            push(&mut out, "backend", backend_name(a.backend));
            a.prep.lines(&mut out);
            push_path(&mut out, "out", &a.out);
        }
        Command::Odometry(a) => {
            push(&mut out, "command", "odometry");
            sequence_lines(&a.seq, &mut out);
            push(&mut out, "rejection", a.rejection);
            push_path(&mut out, "out-traj", &a.out_traj);
            push_path(&mut out, "out-report", &a.out_report);
            push_path(&mut out, "out-timing", &a.out_timing);
        }
        Command::Sweep(a) => {
            push(&mut out, "command", "sweep");
            sequence_lines(&a.seq, &mut out);
            let r: Vec<String> = a.rejections.iter().map(|r| r.to_string()).collect();
            push(&mut out, "rejections", r.join(","));
            push_path(&mut out, "out", &a.out);
        }
        Command::Train(a) => {
            push(&mut out, "command", "train");
            push(&mut out, "data", a.data.display());
            push_path(&mut out, "gt", &a.gt);
            push_path(&mut out, "calib", &a.calib);
            push(&mut out, "epochs", a.epochs);
            push(&mut out, "lr", a.lr);
            push(&mut out, "batch", a.batch);
            push(&mut out, "iters", a.iters);
            push(&mut out, "gate-scale", a.gate_scale);
            push(&mut out, "out-model", a.out_model.display());
            push_path(&mut out, "out-loss", &a.out_loss);
            push_path(&mut out, "init-model", &a.init_model);
            a.prep.lines(&mut out);
        }
        Command::Gradcheck(a) => {
            push(&mut out, "command", "gradcheck");
            push(&mut out, "points", a.points);
            push(&mut out, "iters", a.iters);
            push(&mut out, "problems", a.problems);
            push(&mut out, "kd", a.kd);
            push(&mut out, "weights-only", a.weights_only);
        }
    }
    for (k, v) in out {
        eprintln!("# {k}={v}");
    }
}

fn sequence_lines(a: &SequenceArgs, out: &mut Vec<(String, String)>) {
    push(out, "data", a.data.display());
    push_path(out, "gt", &a.gt);
    push_path(out, "calib", &a.calib);
    push(out, "backend", backend_name(a.backend));
    push_path(out, "model", &a.model);
    push(
        out,
        "initial",
        match a.initial {
            InitialArg::Identity => "identity",
            InitialArg::ConstantVelocity => "constant-velocity",
        },
    );
    a.prep.lines(out);
}

/// Reads `key=value` lines; `#` starts a comment.
fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Io(format!("{}: line {}: expected key=value", path.display(), n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Command line with the config file's entries inserted right after the
/// subcommand, so explicit flags (which come later) override them.
fn layered_args(args: &[String]) -> Result<Vec<String>, Failure> {
    let probe = Cli::command().ignore_errors(true).get_matches_from(args);
    let Some(config) = probe.get_one::<PathBuf>("config") else {
        return Ok(args.to_vec());
    };
    let Some((sub, _)) = probe.subcommand() else {
        return Ok(args.to_vec());
    };
    let entries = read_config_file(config)?;
    let root = Cli::command();
    let known: Vec<String> = root
        .find_subcommand(sub)
        .into_iter()
        .flat_map(|c| c.get_arguments())
        .chain(root.get_arguments())
        .filter_map(|a| a.get_long().map(str::to_string))
        .filter(|l| l != "config")
        .collect();
    if let Some((k, _)) = entries.iter().find(|(k, _)| !known.contains(k)) {
        return Err(Failure::Io(format!("{}: unknown key '{k}' for {sub}", config.display())));
    }
    let at = args.iter().skip(1).position(|a| a == sub).map_or(args.len(), |p| p + 2);
    let mut flags = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => flags.push(format!("--{k}")),
            "false" => {}
            _ => flags.push(format!("--{k}={v}")),
        }
    }
    let mut out = args[..at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn parse_cli() -> Result<Cli, ExitCode> {
    let args: Vec<String> = std::env::args().collect();
    let layered = match layered_args(&args) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message());
            return Err(ExitCode::from(f.code()));
        }
    };
    let matches = Cli::command().args_override_self(true).try_get_matches_from(&layered);
    match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => Ok(cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            Err(ExitCode::from(code))
        }
    }
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    print_config(&cli);
    let outcome = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Odometry(a) => cmd_odometry(a),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn lm_params(prep: &Preprocessing) -> LmParams {
    LmParams::fast().with_iterations(prep.max_iter)
}

fn load_cloud(path: &Path, prep: &Preprocessing) -> Result<PointCloud, Failure> {
    let cloud = read_cloud(path).map_err(io)?;
    let down = voxel_downsample(&cloud, prep.voxel).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    estimate_covariances(&down, &prep.covariance()).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn cmd_register(a: &RegisterArgs) -> Result<(), Failure> {
    let source = load_cloud(&a.source, &a.prep)?;
    let target = load_cloud(&a.target, &a.prep)?;
    let lm = lm_params(&a.prep);
    let mut problem = WgicpProblem::new(source.clone(), target.clone()).with_k_d(a.prep.kd).with_lm(lm.clone());
    problem.knn_temperature = a.prep.temperature;
    let result = match a.backend {
        BackendArg::Icp => align_icp(&source, &target, &lm),
        BackendArg::Gicp => align_gicp(&problem),
        BackendArg::Wgicp => align_wgicp(&problem),
    }
    .map_err(registration_failure)?;
    let line = format_pose(&result.transform);
    println!("{line}");
    println!("objective\t{}", result.final_objective);
    println!("iterations\t{}", result.iterations);
    println!("converged\t{}", result.converged);
    if let Some(out) = &a.out {
        write_file(out, &format!("{line}\n"))?;
    }
    Ok(())
}

fn odometry_config(seq: &SequenceArgs, rejection: f64) -> OdometryConfig {
    OdometryConfig {
        voxel_size: seq.prep.voxel,
        backend: seq.backend.into(),
        rejection_ratio: rejection,
        model_path: seq.model.clone(),
        initial_guess: match seq.initial {
            InitialArg::Identity => InitialGuess::Identity,
            InitialArg::ConstantVelocity => InitialGuess::ConstantVelocity,
        },
        covariance: seq.prep.covariance(),
        k_d: seq.prep.kd,
        knn_temperature: seq.prep.temperature,
        lm: lm_params(&seq.prep),
    }
}

fn read_scans(dir: &Path) -> Result<Vec<PointCloud>, Failure> {
    let files = list_scans(dir).map_err(io)?;
    files.iter().map(|f| read_cloud(f).map_err(io)).collect()
}

fn default_file(explicit: &Option<PathBuf>, dir: &Path, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        let p = dir.join(name);
        p.is_file().then_some(p)
    })
}

fn ground_truth(data: &Path, gt: &Option<PathBuf>, calib: &Option<PathBuf>) -> Result<Option<PoseFile>, Failure> {
    let Some(gt) = default_file(gt, data, "poses.txt") else {
        return Ok(None);
    };
    let calib = default_file(calib, data, "calib.txt");
    read_poses(&gt, calib.as_deref()).map(Some).map_err(io)
}

struct Evaluated {
    run: OdometryRun,
    report: String,
    t_rel: Option<f64>,
    r_rel: Option<f64>,
}

fn evaluate_sequence(seq: &SequenceArgs, rejection: f64, scans: &[PointCloud], gt: Option<&PoseFile>) -> Result<Evaluated, Failure> {
    let config = odometry_config(seq, rejection);
    let run = run_sequence(scans.iter().cloned(), &config).map_err(io)?;
    for f in &run.flagged {
        eprintln!("warning: frame {} fell back to identity: {}", f.frame, f.reason);
    }
    let errors = match gt {
        Some(gt) => {
            let truth = gt.velodyne_trajectory();
            if truth.len() != run.trajectory.len() {
                return Err(Failure::Io(format!(
                    "ground truth has {} poses for {} scans",
                    truth.len(),
                    run.trajectory.len()
                )));
            }
            kitti_errors(&run.trajectory, &truth).ok()
        }
        None => None,
    };
    let report = format_report(&run, errors.as_ref());
    Ok(Evaluated {
        t_rel: errors.as_ref().map(|e| e.t_rel),
        r_rel: errors.as_ref().map(|e| e.r_rel),
        run,
        report,
    })
}

fn cmd_odometry(a: &OdometryArgs) -> Result<(), Failure> {
    let scans = read_scans(&a.seq.data)?;
    let gt = ground_truth(&a.seq.data, &a.seq.gt, &a.seq.calib)?;
    let ev = evaluate_sequence(&a.seq, a.rejection, &scans, gt.as_ref())?;
    if let Some(path) = &a.out_traj {
        write_trajectory(&ev.run.trajectory, path).map_err(io)?;
    }
    let timings = format_timings(&ev.run);
    match &a.out_report {
        Some(path) => {
            write_file(path, &ev.report)?;
            let timing_path = a.out_timing.clone().unwrap_or_else(|| with_suffix(path, ".timing"));
            write_file(&timing_path, &timings)?;
        }
        None => {
            print!("{}", ev.report);
            print!("{timings}");
        }
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Failure> {
    let scans = read_scans(&a.seq.data)?;
    let gt = ground_truth(&a.seq.data, &a.seq.gt, &a.seq.calib)?;
    let mut out = String::from("rejection\tsurviving_pct\tt_rel_pct\tr_rel_deg_per_100m\talignment_ms\n");
    for &r in &a.rejections {
        let ev = evaluate_sequence(&a.seq, r, &scans, gt.as_ref())?;
        let _ = writeln!(
            out,
            "{r}\t{}\t{}\t{}\t{}",
            metric_value(Some(ev.run.surviving_percent())),
            metric_value(ev.t_rel),
            metric_value(ev.r_rel),
            ev.run.mean_timing().alignment
        );
    }
    match &a.out {
        Some(path) => write_file(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<(), Failure> {
    let scans = read_scans(&a.data)?;
    let gt = ground_truth(&a.data, &a.gt, &a.calib)?
        .ok_or_else(|| Failure::Io(format!("{}: no poses.txt and no --gt given", a.data.display())))?;
    if gt.poses.len() != scans.len() {
        return Err(Failure::Io(format!("ground truth has {} poses for {} scans", gt.poses.len(), scans.len())));
    }
    let odo = OdometryConfig {
        voxel_size: a.prep.voxel,
        covariance: a.prep.covariance(),
        ..Default::default()
    };
    let clouds: Vec<PointCloud> = scans.iter().map(|s| preprocess(s, &odo).map_err(io)).collect::<Result<_, _>>()?;
    let dataset: Vec<TrainPair> = (1..clouds.len())
        .map(|t| TrainPair {
            source: clouds[t].clone(),
            target: clouds[t - 1].clone(),
            gt: gt.relative_velodyne(t),
        })
        .collect();
    let model = match &a.init_model {
        Some(p) => WeightModel::load(p).map_err(io)?,
        None => WeightModel::new(seed),
    };
    let mut solver = LmParams::differentiable().with_iterations(a.iters);
    solver.gate_scale = a.gate_scale;
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed,
        k_d: a.prep.kd,
        knn_temperature: a.prep.temperature,
        solver,
        ..Default::default()
    };
    let outcome = train(&model, &dataset, &config).map_err(|e| match e {
        WeightsError::Diverged { .. } => Failure::Diverged(e.to_string()),
        WeightsError::Solver { source: RegistrationError::Diverged { .. }, .. } => Failure::Diverged(e.to_string()),
        other => Failure::Io(other.to_string()),
    })?;
    outcome.model.save(&a.out_model).map_err(io)?;
    let loss_path = a.out_loss.clone().unwrap_or_else(|| with_suffix(&a.out_model, ".loss"));
    write_file(&loss_path, &format_loss_history(&outcome.loss_history))?;
    if let Some(last) = outcome.loss_history.last() {
        println!("final_loss\t{last}");
    }
    println!("epochs\t{}", outcome.loss_history.len());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<(), Failure> {
    let config = GradcheckConfig {
        problems: a.problems,
        points: a.points,
        iterations: a.iters,
        k_d: a.kd,
        seed,
        check_model: !a.weights_only,
        corrupt_adjoint: a.corrupt_adjoint,
        ..Default::default()
    };
    let report = run_gradcheck(&config).map_err(|e| Failure::Check(e.to_string()))?;
    println!("checked\t{}", report.checked);
    println!("max_relative_error\t{:e}", report.max_relative_error);
    println!("median_relative_error\t{:e}", report.median_relative_error);
    if let Some(w) = report.worst {
        println!("worst\tproblem {} {:?} tape {:e} fd {:e}", w.problem, w.wrt, w.tape, w.finite_difference);
    }
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} is not below {GRADCHECK_TOLERANCE:e}",
            report.max_relative_error
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_maps_to_exit_two() {
        let e = RegistrationError::Diverged {
            iteration: 3,
            objective: f64::NAN,
        };
        assert_eq!(registration_failure(e).code(), 2);
        assert_eq!(registration_failure(RegistrationError::SingularNormalEquations).code(), 2);
    }

    #[test]
    fn config_lines_skip_comments() {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        fs::write(tmp.path(), "# header\nvoxel = 0.2 # inline\n\nbackend=icp\n").unwrap();
        let entries = read_config_file(tmp.path()).unwrap();
        assert_eq!(entries, vec![("voxel".into(), "0.2".into()), ("backend".into(), "icp".into())]);
        fs::write(tmp.path(), "voxel\n").unwrap();
        assert_eq!(read_config_file(tmp.path()).unwrap_err().code(), 1);
    }

    #[test]
    fn config_entries_precede_explicit_flags() {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        fs::write(tmp.path(), "voxel=0.2\n").unwrap();
        let args: Vec<String> = ["wgicp", "--config", tmp.path().to_str().unwrap(), "odometry", "--data", "d", "--voxel", "0.4"]
            .map(String::from)
            .to_vec();
        let layered = layered_args(&args).unwrap();
        assert_eq!(&layered[3..], &["odometry", "--voxel=0.2", "--data", "d", "--voxel", "0.4"]);
    }
}
