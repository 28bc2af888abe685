//! Command line workflow: scene synthesis, training, sampling, rendering,
//! evaluation, benchmarking and the HTTP service.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use objscale_core::evalbench::{
    best_of_n_eval, bench_soft_z, build_gt_set, scalenet_vs_oracle, BenchConfig, EvalConfig, EvalReport,
};
use objscale_core::scalenet::{sample_many, SamplerConfig};
use objscale_core::scenegen::{
    load_bundle, load_gt, oracle_valid_region, save_bundle, save_gt, synthesize, SceneParams, THETA_AGREE,
};
use objscale_core::trainer::{init_fields, stage1_bootstrap, train_full, TrainConfig};
use objscale_core::{Checkpoint, Pose, SceneBundle};
use serde::Serialize;

pub mod server;

/// Success.
pub const EXIT_OK: i32 = 0;
/// Bad arguments or input files.
pub const EXIT_USER: i32 = 1;
/// Anything else.
pub const EXIT_INTERNAL: i32 = 2;

/// Largest accepted image side.
pub const MAX_RENDER_SIDE: usize = 256;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<objscale_core::Error> for CliError {
    fn from(e: objscale_core::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "objscale", version, about = "Object-scale learning for multi-object scenes")]
pub struct Cli {
    /// Worker threads (0: all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene bundle with ground truth.
    Synth(SynthArgs),
    /// Fit every object alone (stage 1) and save the fields.
    Bootstrap(TrainArgs),
    /// Run both training stages.
    Train(TrainArgs),
    /// Draw valid scale combinations from a trained model.
    Sample(SampleArgs),
    /// Render a training view under given scales.
    Render(RenderArgs),
    /// Brute-force valid region of a synthetic scene.
    Oracle(OracleArgs),
    /// Best-of-n evaluation against ground-truth configurations.
    Eval(EvalArgs),
    /// Time composite labelling against the soft Z-buffer.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub objects: usize,
    #[arg(long, default_value_t = 15)]
    pub frames: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub skip_stage1: bool,
    /// Single-threaded, bit-reproducible run.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub max_attempts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated normalized scales, anchor first (`1,0.3`) or free only.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub scales: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 101)]
    pub res: usize,
    #[arg(long, default_value_t = THETA_AGREE)]
    pub theta: f64,
    /// Also compare a trained scale network against the oracle.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// JSON evaluation config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-configuration metric table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16, 64])]
    pub hs: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub rays: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub bench_threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 7870)]
    pub port: u16,
    /// Single-threaded rendering.
    #[arg(long)]
    pub deterministic: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let deterministic = matches!(&cli.command, Command::Serve(a) if a.deterministic)
        || matches!(&cli.command, Command::Train(a) | Command::Bootstrap(a) if a.deterministic);
    let threads = if deterministic { 1 } else { cli.threads };
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Bootstrap(a) => bootstrap(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Render(a) => render(&a),
        Command::Oracle(a) => oracle(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write(path, s.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let s = fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn synth(a: &SynthArgs) -> CliResult {
    let params = SceneParams {
        seed: a.seed,
        objects: a.objects,
        frames: a.frames,
        width: a.size,
        height: a.size,
        ..SceneParams::default()
    };
    let (bundle, gt) = synthesize(&params)?;
    save_bundle(&bundle, &a.out)?;
    save_gt(&gt, &a.out)?;
    println!(
        "wrote {} objects x {} frames ({}x{}) to {}",
        bundle.num_objects(),
        bundle.num_frames(),
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    cfg.skip_stage1 |= a.skip_stage1;
    cfg.deterministic |= a.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn bootstrap(a: &TrainArgs) -> CliResult {
    let cfg = train_config(a)?;
    let bundle = load_bundle(&a.scene)?;
    let order = objscale_core::trainer::anchor_order(&bundle);
    let ordered = bundle.reordered(&order);
    let mut fields = init_fields(&ordered, &cfg)?;
    let report = stage1_bootstrap(&mut fields, &ordered, &cfg)?;
    let k = fields.len();
    let ckpt = Checkpoint {
        fields,
        scalenet: objscale_core::scalenet::ScaleMlp::constant(k, 0.5),
        bounds: ordered.bounds().clone(),
        order,
        samples_per_ray: cfg.composite_samples,
    };
    ckpt.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!("stage 1 done in {:.1}s; wrote {}", report.seconds, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    let cfg = train_config(a)?;
    let bundle = load_bundle(&a.scene)?;
    let (ckpt, report) = train_full(&bundle, &cfg)?;
    ckpt.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "trained in {:.1}s; acceptance rates {:?}; wrote {}",
        report.seconds,
        report.stage2.acceptance_rates(),
        a.out.display()
    );
    Ok(())
}

fn sample(a: &SampleArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let cfg = SamplerConfig {
        validity_threshold: a.threshold,
        max_rejection_attempts: a.max_attempts,
        rng_seed: a.seed,
    };
    let samples = sample_many(&ckpt.scalenet, &ckpt.bounds, &cfg, a.count)?;
    write_json(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Scales snapped to a 1e-4 grid, the resolution the render cache keys on.
pub fn quantize_scales(scales: &[f64]) -> Vec<f64> {
    scales.iter().map(|s| ((s * 1e4).round() / 1e4).min(0.9999)).collect()
}

/// Free scales from either form: `[1, s_2, ..]` or `[s_2, ..]`.
pub fn free_scales(scales: &[f64], k: usize) -> Result<Vec<f64>, String> {
    if k > 0 && scales.len() == k && scales[0] == 1.0 {
        Ok(scales[1..].to_vec())
    } else if scales.len() + 1 == k {
        Ok(scales.to_vec())
    } else {
        Err(format!("expected {} free scales (or {k} with a leading 1), got {}", k.saturating_sub(1), scales.len()))
    }
}

/// PNG of the scene at `frame`, optionally from `camera`. The CLI and the
/// service both go through this function.
pub fn render_png(
    ckpt: &Checkpoint,
    ordered: &SceneBundle,
    free: &[f64],
    frame: usize,
    camera: Option<&Pose>,
    width: usize,
    height: usize,
) -> objscale_core::Result<Vec<u8>> {
    let scales = ckpt.combination(&quantize_scales(free))?;
    ckpt.render_frame(ordered, &scales, frame, camera, width, height)?.png_bytes()
}

fn render(a: &RenderArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ordered = ckpt.ordered_bundle(&load_bundle(&a.scene)?)?;
    let free = free_scales(&a.scales, ckpt.num_objects()).map_err(user)?;
    if free.iter().any(|s| !(0.0..1.0).contains(s)) {
        return Err(user("free scales must lie in [0, 1)"));
    }
    let w = a.width.unwrap_or(ordered.manifest.width);
    let h = a.height.unwrap_or(ordered.manifest.height);
    let png = render_png(&ckpt, &ordered, &free, a.frame, None, w, h)?;
    write(&a.out, &png)?;
    println!("wrote {}x{} image to {}", w, h, a.out.display());
    Ok(())
}

fn oracle(a: &OracleArgs) -> CliResult {
    let bundle = load_bundle(&a.scene)?;
    let gt = load_gt(&a.scene, &bundle.manifest)?;
    #[derive(Serialize)]
    struct Out {
        grid: objscale_core::scenegen::OracleGrid,
        comparison: Option<objscale_core::evalbench::OracleComparison>,
    }
    let (grid, comparison) = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let b = ckpt.ordered_bundle(&bundle)?;
            let g = gt.reordered(&ckpt.order);
            let grid = oracle_valid_region(&b, &g, a.res, a.theta)?;
            let cmp = scalenet_vs_oracle(&ckpt.scalenet, &grid, a.threshold)?;
            println!("IoU {:.3}, AUC {:?}", cmp.iou, cmp.auc);
            (grid, Some(cmp))
        }
        None => (oracle_valid_region(&bundle, &gt, a.res, a.theta)?, None),
    };
    println!("valid fraction {:.3}", grid.valid_fraction());
    write_json(&a.out, &Out { grid, comparison })
}

fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("config,free,solution,psnr,ssim,ssimae,miou,pq,scale_mse\n");
    for (i, c) in report.configs.iter().enumerate() {
        let free: Vec<String> = c.config.free.iter().map(|v| format!("{v:.4}")).collect();
        for (name, m) in [("best", &c.best), ("fixed", &c.fixed)] {
            s.push_str(&format!(
                "{i},{},{name},{},{},{},{},{},{}\n",
                free.join(" "),
                m.psnr,
                m.ssim,
                m.ssimae,
                m.miou,
                m.pq,
                m.scale_mse
            ));
        }
    }
    s
}

fn eval(a: &EvalArgs) -> CliResult {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scene = load_bundle(&a.scene)?;
    let gt = load_gt(&a.scene, &scene.manifest)?;
    let bundle = ckpt.ordered_bundle(&scene)?;
    let gt = gt.reordered(&ckpt.order);
    let grid = oracle_valid_region(&bundle, &gt, cfg.oracle_resolution, cfg.theta)?;
    let set = build_gt_set(&bundle, &gt, &grid, &cfg)?;
    let mut report = best_of_n_eval(&ckpt, &bundle, &set, &cfg)?;
    report.oracle = Some(scalenet_vs_oracle(&ckpt.scalenet, &grid, cfg.validity_threshold)?);
    write_json(&a.out, &report)?;
    if let Some(p) = &a.csv {
        write(p, eval_csv(&report).as_bytes())?;
    }
    println!(
        "best-of-{} PSNR {:.2} dB, fixed {:.2} dB, scale MSE {:.3e} vs {:.3e}",
        report.n, report.best.mean.psnr, report.fixed.mean.psnr, report.best.mean.scale_mse, report.fixed.mean.scale_mse
    );
    Ok(())
}

fn bench(a: &BenchArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let bundle = ckpt.ordered_bundle(&load_bundle(&a.scene)?)?;
    let cfg = BenchConfig {
        rays: a.rays,
        hs: a.hs.clone(),
        repeats: a.repeats,
        threads: a.bench_threads,
        ..BenchConfig::default()
    };
    let rows = bench_soft_z(&ckpt, &bundle, &cfg)?;
    let mut csv = String::from("h,composite_seconds,soft_z_seconds,composite_queries,soft_z_queries,query_ratio,speedup\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.h, r.composite_seconds, r.soft_z_seconds, r.composite_queries, r.soft_z_queries, r.query_ratio, r.speedup
        ));
        println!("H={:<3} query ratio {:>5.1}  speedup {:>6.1}x", r.h, r.query_ratio, r.speedup);
    }
    write(&a.out, csv.as_bytes())
}

fn serve(a: &ServeArgs) -> CliResult {
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(server::serve(a.ckpt.clone(), a.scene.clone(), a.port))
}
