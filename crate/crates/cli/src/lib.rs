//! Command-line front end. `run` parses argv, applies the JSON config overlay
//! (flags win), prints the resolved config and master seed to stderr, and
//! maps failures to exit codes: 1 for module errors, 2 for usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use phyrm_core::synthgen::{derive_seed, generate_dataset, read_dataset, write_dataset, GenConfig, Split};
use phyrm_core::{Grid2D, MetricReport};
use phyrm_model::trainer::{observation_mask, write_ablation_csv, AblationRow};
use phyrm_model::{ablation, load_model, train, TrainConfig, Variant};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod error;
pub mod image;
pub mod suite;

pub use error::{CliError, Result};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "PHYRM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "phyrm",
    version,
    about = "Physics-aligned radio-map reconstruction at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train both networks and write metrics.csv plus a checkpoint.
    Train(TrainArgs),
    /// Reconstruct one scene from a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Compare two .f32g maps.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Train every loss combination for several seeds.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub maps: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Add vehicles (dynamic radio maps).
    #[arg(long)]
    pub drm: bool,
    /// JSON file with generator settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    Pinn,
    Mse,
    Reg,
    Rfsa,
    Anchor,
}

/// Training flags shared by `train` and `ablation`.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON file mirroring the training config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    /// U-Net widths per level, e.g. 16,32,64.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Observation rate used for both training and evaluation.
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablate>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset record index.
    #[arg(long)]
    pub scene: usize,
    #[arg(long, default_value_t = 0.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PNG of the sampled map; the .f32g and the stage-1 and mask images are
    /// written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory, if not the one recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Tolerance of the network checks; the physics check always uses 1e-6.
    #[arg(long, default_value_t = suite::NETWORK_TOL)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn announce(command: &str, config: &impl Serialize, seed: u64) {
    let json = serde_json::to_string(config).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    eprintln!("phyrm {command}: resolved config {json}");
    eprintln!("phyrm {command}: master seed {seed}");
}

pub fn resolve_gen(args: &GenArgs) -> Result<GenConfig> {
    let mut cfg: GenConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(v) = args.maps {
        cfg.n_maps = v;
    }
    if let Some(v) = args.size {
        cfg.map_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.drm {
        cfg.drm = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = o.eval_scenes {
        cfg.eval_scenes = Some(v);
    }
    if let Some(v) = &o.channels {
        cfg.model.channels = v.clone();
    }
    if let Some(r) = o.rate {
        cfg.obs_rate = (r, r);
        cfg.eval_obs_rate = r;
    }
    Ok(cfg)
}

pub fn resolve_train(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = apply_overrides(&args.overrides)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    match args.ablate {
        Some(Ablate::Pinn) => cfg.disable_pinn = true,
        Some(Ablate::Mse) => cfg.disable_mse = true,
        Some(Ablate::Reg) => cfg.disable_reg = true,
        Some(Ablate::Rfsa) => cfg.disable_rfsa = true,
        Some(Ablate::Anchor) => cfg.disable_anchor = true,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = resolve_gen(args)?;
    announce("gen", &cfg, cfg.seed);
    let records = generate_dataset(&cfg)?;
    let manifest = write_dataset(&records, &cfg, &args.out)?;
    println!(
        "wrote {} records ({} train, {} test) to {}",
        manifest.records.len(),
        records.iter().filter(|r| r.split == Split::Train).count(),
        records.iter().filter(|r| r.split == Split::Test).count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train(args)?;
    announce("train", &cfg, cfg.seed);
    fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let out = train(&cfg, &args.data, &args.out)?;
    if let Some(last) = out.rows.last() {
        println!(
            "step {}: nmse={:.6} rmse={:.6} ssim={:.6} nmse_stage1={:.6}",
            last.step, last.nmse, last.rmse, last.ssim, last.nmse_stage1
        );
    }
    Ok(())
}

/// `<stem><suffix>.<ext>` next to `base`.
fn sibling(base: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let (model, params, meta) = load_model(&args.ckpt)?;
    let data_dir = args
        .data
        .clone()
        .or(meta.data_dir.clone())
        .ok_or_else(|| CliError::Invalid("checkpoint records no dataset; pass --data".into()))?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        ckpt: &'a Path,
        data: &'a Path,
        scene: usize,
        rate: f64,
        seed: u64,
        out: &'a Path,
    }
    announce(
        "reconstruct",
        &Resolved {
            ckpt: &args.ckpt,
            data: &data_dir,
            scene: args.scene,
            rate: args.rate,
            seed: args.seed,
            out: &args.out,
        },
        args.seed,
    );
    if !(0.0..=1.0).contains(&args.rate) {
        return Err(CliError::Invalid(format!("rate {} outside [0, 1]", args.rate)));
    }
    let data = read_dataset(&data_dir)?;
    let record = data
        .records
        .iter()
        .find(|r| r.index == args.scene)
        .ok_or_else(|| CliError::Invalid(format!("scene {} not in {}", args.scene, data_dir.display())))?;
    let mask = observation_mask(record, args.rate, derive_seed(args.seed, 1))?;
    let (y0, y) = model.reconstruct(&params, record, &mask, derive_seed(args.seed, 2))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    // the PNGs are rendered from the stored f32 values so both files agree
    let y = Grid2D::from_f32g_bytes(&y.to_f32g_bytes()).map_err(CliError::Invalid)?;
    let y0 = Grid2D::from_f32g_bytes(&y0.to_f32g_bytes()).map_err(CliError::Invalid)?;
    y.write_f32g(sibling(&args.out, "", "f32g"))?;
    image::write_grid_png(&args.out, &y)?;
    y0.write_f32g(sibling(&args.out, ".stage1", "f32g"))?;
    image::write_grid_png(&sibling(&args.out, ".stage1", "png"), &y0)?;
    image::write_mask_png(&sibling(&args.out, ".mask", "png"), &mask)?;
    let report = MetricReport::compute(&y, &record.truth)?;
    println!(
        "scene {}: nmse={:.6} rmse={:.6} ssim={:.6}",
        args.scene, report.nmse, report.rmse, report.ssim
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    announce("eval", &(&args.pred, &args.truth, &args.csv), 0);
    let pred = Grid2D::read_f32g(&args.pred)?;
    let truth = Grid2D::read_f32g(&args.truth)?;
    let report = MetricReport::compute(&pred, &truth)?;
    println!("nmse={} rmse={} ssim={}", report.nmse, report.rmse, report.ssim);
    if let Some(path) = &args.csv {
        let csv_err = |source| CliError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.serialize(report).map_err(csv_err)?;
        w.flush().map_err(CliError::io(path))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.tol > 0.0) {
        return Err(CliError::Invalid(format!("tolerance {} must be positive", args.tol)));
    }
    announce("gradcheck", &args.tol, 0);
    let entries = suite::run_suite(args.tol)?;
    let mut failed = Vec::new();
    for e in &entries {
        let blocks = e.report.blocks.len();
        let checked: usize = e.report.blocks.iter().map(|b| b.checked).sum();
        println!(
            "{:<12} {:>3} blocks {:>5} coords  max_rel_err={:.3e}  tol={:.0e}  worst={}  {}",
            e.name,
            blocks,
            checked,
            e.report.max_rel_err,
            e.tol,
            e.report.worst_block.as_deref().unwrap_or("-"),
            if e.pass() { "PASS" } else { "FAIL" }
        );
        if !e.pass() {
            println!(
                "{:<12} largest violating |a-n|={:.2e}, finite-difference resolution {:.2e} (objective {:.4})",
                "", e.report.violation_abs_err, e.report.resolution, e.report.value
            );
        }
        if !e.pass() {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn cmd_ablation(args: &AblationArgs) -> Result<()> {
    let mut base = apply_overrides(&args.overrides)?;
    base.validate()?;
    if args.seeds == 0 {
        return Err(CliError::Invalid("--seeds must be >= 1".into()));
    }
    announce("ablation", &base, base.seed);
    let data = read_dataset(&args.data)?;
    let train_split: Vec<_> = data.split(Split::Train).collect();
    let test_split: Vec<_> = data.split(Split::Test).collect();
    let seeds: Vec<u64> = (0..args.seeds).collect();
    base.eval_interval = base.steps;
    let rows = ablation(&train_split, &test_split, &base, &Variant::ALL, &seeds)?;
    write_ablation_csv(&args.out, &rows)?;
    for (label, mean) in variant_means(&rows) {
        println!("{label:<14} mean nmse={mean:.6}");
    }
    Ok(())
}

/// Mean NMSE per variant, in first-seen order.
pub fn variant_means(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(l, _, _)| *l == r.variant) {
            Some(e) => {
                e.1 += r.nmse;
                e.2 += 1;
            }
            None => out.push((r.variant.clone(), r.nmse, 1)),
        }
    }
    out.into_iter().map(|(l, s, n)| (l, s / n as f64)).collect()
}

/// Builds the global worker pool from `PHYRM_THREADS`, if set.
pub fn init_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("{THREADS_ENV}={raw:?} is not a positive integer"))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

/// Parses `argv` and runs it; the return value is the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

/// The error and its sources on a single line.
fn one_line(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        src = s.source();
    }
    msg.replace('\n', " ")
}
