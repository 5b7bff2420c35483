use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rigfield::dataio::{load_dataset, manifest_path, write_synth_scene, DrivingSequence, SceneDataset, SynthSpec, Trajectory};
use rigfield::headmodel::HeadParams;
use rigfield::model::NetworkConfig;
use rigfield::radiance::ConditioningConfig;
use rigfield::rendering::{save_float_dump, MapKind};
use rigfield::training::{
    holdout_indices, optimize_deform_code, train, CodeOptConfig, Metrics, TrainConfig, ValidationFrame, CHECKPOINT_FILE,
};
use rigfield_service::{rescale_camera, CameraSpec, MapFlags, OrbitSpec, RenderError, RenderRequest, Session};

pub enum CliError {
    /// Bad flags or paths; exit code 2.
    Usage(String),
    Failed(String),
}

impl From<rigfield::Error> for CliError {
    fn from(e: rigfield::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Request(r) => CliError::Usage(r.to_string()),
            RenderError::Internal(e) => e.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "rigfield", version, about = "Train and render controllable neural portraits")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic portrait dataset.
    Synth(SynthArgs),
    /// Train a portrait model on a dataset.
    Train(TrainArgs),
    /// Render a checkpoint for given parameters and camera, with diagnostic maps.
    Render(RenderArgs),
    /// Render a driving parameter sequence with the first training frame's codes.
    Reanimate(ReanimateArgs),
    /// Fit deformation codes to held-out frames and report image metrics.
    Eval(EvalArgs),
    /// Write depth and deformation maps for a training frame.
    Inspect(InspectArgs),
    /// Start the HTTP render service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TrajectoryArg {
    Capture,
    Orbit,
    Performance,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the manifest, images and morphable model.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 150)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Number of expression coefficients.
    #[arg(long, default_value_t = 10)]
    expressions: usize,
    #[arg(long, value_enum, default_value_t = TrajectoryArg::Capture)]
    trajectory: TrajectoryArg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NetArg {
    /// 8×128 deformation, 8×256 radiance.
    Full,
    /// 4×64 deformation, 4×128 radiance.
    Desk,
    /// 2×32 deformation, 2×64 radiance.
    Tiny,
}

impl NetArg {
    fn config(self) -> NetworkConfig {
        match self {
            NetArg::Full => NetworkConfig::full(0),
            NetArg::Desk => NetworkConfig::desk(0),
            NetArg::Tiny => NetworkConfig::tiny(0, 32, 64),
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    /// Conditioning configuration: A, B or C.
    #[arg(long, default_value = "C")]
    config: ConditioningConfig,
    #[arg(long, value_enum, default_value_t = NetArg::Full)]
    net: NetArg,
    #[arg(long, default_value_t = 1550)]
    rays: usize,
    /// Coarse plus fine samples per ray.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    coarse: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr1: f64,
    /// Number of evenly spaced frames held out from training.
    #[arg(long, default_value_t = 10)]
    holdout: usize,
    /// Held-out PSNR every this many steps (0 disables).
    #[arg(long, default_value_t = 1000)]
    eval_every: u64,
    /// Print a log line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ck: PathBuf,
    /// `zero` or `frame:N` (parameters of training frame N).
    #[arg(long, default_value = "zero")]
    params: String,
    /// `frame:N` or `orbit:AZIMUTH,ELEVATION,RADIUS` (radians, around the origin).
    #[arg(long, default_value = "frame:0")]
    camera: String,
    /// Output width in pixels (16 to 256); defaults to the training width.
    #[arg(long)]
    resolution: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
pub struct ReanimateArgs {
    #[arg(long)]
    ck: PathBuf,
    /// Driving sequence file (TOML list of `[[frames]]` with beta_exp, pose and optional camera).
    #[arg(long)]
    driving: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<u32>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ck: PathBuf,
    /// Dataset the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Number of evenly spaced held-out frames to evaluate.
    #[arg(long, default_value_t = 10)]
    holdout: usize,
    /// Code-fitting iterations per frame.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Rays per fitting iteration.
    #[arg(long, default_value_t = 1550)]
    rays: usize,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    ck: PathBuf,
    /// Training frame to inspect, rendered with its own codes.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<u32>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    ck: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

pub fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Render(a) => render(a, seed),
        Command::Reanimate(a) => reanimate(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Inspect(a) => inspect(a, seed),
        Command::Serve(a) => serve(a),
    }
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("RNRF_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("RNRF_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))
}

fn require_exists(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn open_checkpoint(path: &Path) -> CliResult<Session> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    require_exists(&file, "checkpoint")?;
    Ok(Session::load(path)?)
}

fn open_dataset(path: &Path) -> CliResult<SceneDataset> {
    require_exists(&manifest_path(path), "dataset manifest")?;
    Ok(load_dataset(path)?)
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn synth(a: SynthArgs, seed: u64) -> CliResult {
    let spec = SynthSpec {
        n_frames: a.frames,
        width: a.width,
        height: a.height,
        num_expressions: a.expressions,
        trajectory: match a.trajectory {
            TrajectoryArg::Capture => Trajectory::Capture,
            TrajectoryArg::Orbit => Trajectory::Orbit,
            TrajectoryArg::Performance => Trajectory::Performance,
        },
        seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = write_synth_scene(&spec, &a.out)?;
    println!("wrote {} frames at {}x{} to {}", ds.frames.len(), ds.width, ds.height, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64) -> CliResult {
    let ds = open_dataset(&a.data)?;
    let config = TrainConfig {
        rays_per_batch: a.rays,
        samples_per_ray: a.samples,
        coarse_samples: a.coarse,
        total_steps: a.steps,
        lr0: a.lr0,
        lr1: a.lr1,
        mode: a.config,
        network: a.net.config(),
        holdout: a.holdout,
        eval_every: a.eval_every,
        ..Default::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let log_every = a.log_every.max(1);
    let started = std::time::Instant::now();
    let out = train(&ds, &config, seed, Some(&a.out), |r| {
        let step = r.step;
        if step % log_every == 0 || step == config.total_steps || r.psnr_eval.is_some() {
            let eval = r.psnr_eval.map(|p| format!("  held-out psnr {p:.2}")).unwrap_or_default();
            println!("step {step:>6}  loss {:.6e}  lr {:.2e}{eval}  [{:.0}s]", r.loss, r.lr, started.elapsed().as_secs_f64());
        }
    })?;
    println!("checkpoint at step {} written to {}", out.checkpoint.meta.step, a.out.display());
    Ok(())
}

fn parse_frame(s: &str, flag: &str) -> CliResult<usize> {
    s.parse().map_err(|_| CliError::Usage(format!("--{flag}: bad frame index {s:?}")))
}

fn parse_params(s: &str, session: &Session) -> CliResult<HeadParams> {
    if s == "zero" {
        return Ok(HeadParams::zeros(session.num_expressions()));
    }
    if let Some(i) = s.strip_prefix("frame:") {
        let i = parse_frame(i, "params")?;
        let frames = &session.checkpoint.meta.frames;
        return frames
            .get(i)
            .map(|f| f.params.clone())
            .ok_or_else(|| CliError::Usage(format!("--params: frame {i} out of range (0..{})", frames.len())));
    }
    Err(CliError::Usage(format!("--params: expected `zero` or `frame:N`, got {s:?}")))
}

fn parse_camera(s: &str) -> CliResult<CameraSpec> {
    if let Some(i) = s.strip_prefix("frame:") {
        return Ok(CameraSpec::Frame(parse_frame(i, "camera")?));
    }
    if let Some(rest) = s.strip_prefix("orbit:") {
        let v: Vec<f64> = rest
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--camera: bad orbit {rest:?}")))?;
        if let [azimuth, elevation, radius] = v[..] {
            return Ok(CameraSpec::Orbit(OrbitSpec { azimuth, elevation, radius, look_at: [0.0; 3] }));
        }
    }
    Err(CliError::Usage(format!("--camera: expected `frame:N` or `orbit:AZ,EL,R`, got {s:?}")))
}

/// The request `rigfield render` issues; the service returns the same bytes for it.
pub fn render_request(params: &HeadParams, camera: CameraSpec, resolution: Option<u32>, seed: u64) -> RenderRequest {
    RenderRequest {
        beta_exp: params.beta_exp.clone(),
        beta_pose: params.pose.to_vector().to_vec(),
        camera,
        resolution,
        maps: MapFlags::default(),
        seed,
    }
}

const MAPS: [MapKind; 3] = [MapKind::Depth, MapKind::Residual, MapKind::Deformation];

fn render(a: RenderArgs, seed: u64) -> CliResult {
    let session = open_checkpoint(&a.ck)?;
    let params = parse_params(&a.params, &session)?;
    let req = render_request(&params, parse_camera(&a.camera)?, a.resolution, seed);
    let out = session.render(&req)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("color.png"), &out.png)?;
    for kind in MAPS {
        write_file(&a.out.join(format!("{}.png", kind.name())), &out.image.png(kind)?)?;
    }
    println!("rendered {}x{} to {}", out.image.width, out.image.height, a.out.display());
    Ok(())
}

fn reanimate(a: ReanimateArgs, seed: u64) -> CliResult {
    let session = open_checkpoint(&a.ck)?;
    require_exists(&a.driving, "driving sequence")?;
    let seq = DrivingSequence::load(&a.driving)?;
    create_dir(&a.out)?;
    let reference = session.checkpoint.meta.reference_frame();
    for (i, f) in seq.frames.iter().enumerate() {
        let params = HeadParams { beta_exp: f.beta_exp.clone(), pose: f.pose.clone() };
        let camera = f.camera.clone().map_or(CameraSpec::Frame(reference), CameraSpec::Full);
        let out = session
            .render(&render_request(&params, camera, a.resolution, seed))
            .map_err(|e| CliError::Failed(format!("driving frame {i}: {e}")))?;
        write_file(&a.out.join(format!("frame_{i:04}.png")), &out.png)?;
    }
    println!("rendered {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    frame: usize,
    before: Metrics,
    after: Metrics,
}

#[derive(Serialize)]
struct EvalReport {
    frames: Vec<EvalRow>,
    mean_mse: f64,
    mean_psnr: f64,
    mean_face_mse_before: Option<f64>,
    mean_face_mse: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.4e}"))
}

fn eval(a: EvalArgs, seed: u64) -> CliResult {
    let session = open_checkpoint(&a.ck)?;
    let ds = open_dataset(&a.data)?;
    let meta = &session.checkpoint.meta;
    if ds.model.content_hash() != meta.model_hash || ds.frames.len() != meta.frames.len() {
        return Err(CliError::Usage("dataset does not match the checkpoint".into()));
    }
    let frames = holdout_indices(ds.frames.len(), a.holdout).map_err(|e| CliError::Usage(e.to_string()))?;
    let recorded = meta.holdout_frames();
    if !recorded.is_empty() && recorded != frames {
        eprintln!("warning: evaluating frames {frames:?}, but training held out {recorded:?}");
    }
    let reference = meta.reference_frame();
    let cfg = CodeOptConfig {
        iters: a.iters,
        lr: a.lr,
        rays_per_iter: a.rays,
        coarse_samples: meta.train_config.coarse_samples,
        fine_samples: meta.train_config.fine_samples(),
        window_alpha: meta.window_alpha,
        seed,
        ..Default::default()
    };
    let (omega, phi) = (session.model.deform_code(reference), session.model.appear_code(reference));
    let mut rows = Vec::new();
    println!("{:>6}  {:>11}  {:>7}  {:>11}  {:>11}", "frame", "MSE", "PSNR", "FaceMSE", "FaceMSE@0");
    for &i in &frames {
        let f = &ds.frames[i];
        let v = ValidationFrame {
            width: ds.width as usize,
            height: ds.height as usize,
            image: f.image.clone(),
            camera: f.camera.clone(),
            params: f.params.clone(),
            mask: f.mask.clone(),
        };
        let r = optimize_deform_code(&session.model, &session.head, &v, &omega, &phi, &cfg)?;
        println!(
            "{i:>6}  {:>11.4e}  {:>7.2}  {:>11}  {:>11}",
            r.after.mse,
            r.after.psnr,
            fmt_opt(r.after.face_mse),
            fmt_opt(r.before.face_mse)
        );
        rows.push(EvalRow { frame: i, before: r.before, after: r.after });
    }
    let report = EvalReport {
        mean_mse: rows.iter().map(|r| r.after.mse).sum::<f64>() / rows.len() as f64,
        mean_psnr: rows.iter().map(|r| r.after.psnr).sum::<f64>() / rows.len() as f64,
        mean_face_mse_before: mean(rows.iter().map(|r| r.before.face_mse)),
        mean_face_mse: mean(rows.iter().map(|r| r.after.face_mse)),
        frames: rows,
    };
    println!(
        "{:>6}  {:>11.4e}  {:>7.2}  {:>11}  {:>11}",
        "mean",
        report.mean_mse,
        report.mean_psnr,
        fmt_opt(report.mean_face_mse),
        fmt_opt(report.mean_face_mse_before)
    );
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(e.to_string()))?;
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn inspect(a: InspectArgs, seed: u64) -> CliResult {
    let session = open_checkpoint(&a.ck)?;
    let meta = &session.checkpoint.meta;
    let frame = meta
        .frames
        .get(a.frame)
        .ok_or_else(|| CliError::Usage(format!("--frame {} out of range (0..{})", a.frame, meta.frames.len())))?;
    let input = session.checkpoint.frame_input(&session.model, &session.head, &frame.params, a.frame)?;
    let (w, h, warning) = session.output_size(a.resolution);
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    let camera = rescale_camera(&frame.camera, meta.width, meta.height, w, h);
    let img = rigfield::rendering::render_image(&session.model, &input, &camera, w as usize, h as usize, &session.render_options(seed))?;
    create_dir(&a.out)?;
    write_file(&a.out.join("color.png"), &img.png(MapKind::Color)?)?;
    for kind in MAPS {
        write_file(&a.out.join(format!("{}.png", kind.name())), &img.png(kind)?)?;
        let (c, raw) = img.raw(kind);
        save_float_dump(&a.out.join(format!("{}.rnfd", kind.name())), img.width, img.height, c, raw)?;
    }
    let max = |v: &[f32]| v.iter().fold(0.0f32, |m, &x| m.max(x));
    println!("frame {}: max |D| {:.4e}, max |D̂| {:.4e}", a.frame, max(&img.delta_mag), max(&img.deform_mag));
    println!("maps written to {}", a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let session = Arc::new(open_checkpoint(&a.ck)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(format!("runtime: {e}")))?;
    rt.block_on(rigfield_service::serve(session, a.addr, |addr| println!("listening on http://{addr}")))
        .map_err(|e| CliError::Failed(format!("serve: {e}")))
}
