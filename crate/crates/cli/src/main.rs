//! `neto`: generate synthetic captures, train a field, extract and score
//! meshes, and dump single light paths.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use neto_core::capture::{generate_dataset, load_dataset};
use neto_core::config::RunConfig;
use neto_core::field::{checkpoint, AnalyticShape, NeuralField, ScalarField};
use neto_core::geometry::{MonitorPlane, Ray};
use neto_core::mesh::{evaluate, marching_cubes, TriangleMesh, MIN_RESOLUTION};
use neto_core::tracer::{check_self_occlusion, scene_bound, trace_two_bounce, PathStatus};
use neto_core::train;

/// Resolved-config file written next to every output.
const RESOLVED: &str = "config.resolved";

#[derive(Parser, Debug)]
#[command(name = "neto", version, about = "Transparent-object reconstruction from refractive correspondences")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Key-value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a capture of an analytic shape.
    GenData(GenData),
    /// Optimize a field against a dataset.
    Train(Train),
    /// Extract the zero level set of a checkpoint as OBJ.
    Extract(Extract),
    /// Score a reconstruction against ground truth.
    Eval(Eval),
    /// Trace one pixel and print the path.
    Trace(Trace),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    res: Option<u32>,
    /// Falls back to NETO_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Store the landing point of multi-bounce rays as Q.
    #[arg(long)]
    corrupt_multibounce_q: bool,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Falls back to NETO_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// `volume` or `surface`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_occlusion_check: bool,
    #[arg(long)]
    no_eikonal: bool,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    no_refraction: bool,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Start over in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Extract {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Falls back to NETO_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Trace {
    /// Trained field to trace through.
    #[arg(long, conflicts_with = "shape", required_unless_present = "shape")]
    checkpoint: Option<PathBuf>,
    /// Analytic preset to trace through instead.
    #[arg(long)]
    shape: Option<String>,
    /// Dataset whose cameras and monitors to use (default: the configured rig).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Pixel column and row.
    #[arg(long, num_args = 2, value_names = ["U", "V"])]
    pixel: Vec<u32>,
    /// Sharpness used with `--shape`.
    #[arg(long, default_value_t = 400.0)]
    sharpness: f64,
    #[arg(long)]
    no_occlusion_check: bool,
}

/// Bad input from the operator; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("NETO_SEED") {
        cfg.set("seed", &seed).map_err(|e| usage(format!("NETO_SEED: {e}")))?;
    }
    if let Some(p) = &cli.config {
        cfg.apply_file(p).map_err(|e| usage(e.to_string()))?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v).map_err(|e| usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, key: &str, value: impl ToString) -> Result<()> {
    cfg.set(key, &value.to_string()).map_err(|e| usage(e.to_string()))
}

fn dir_is_empty(p: &Path) -> bool {
    std::fs::read_dir(p).map_or(true, |mut d| d.next().is_none())
}

fn refuse_existing(p: &Path, force: bool) -> Result<()> {
    if !force && p.exists() && !(p.is_dir() && dir_is_empty(p)) {
        bail!(usage(format!("{} exists; pass --force to overwrite", p.display())));
    }
    Ok(())
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join(RESOLVED), cfg.to_text()).with_context(|| format!("writing {}", dir.display()))
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(s) = &a.shape {
        set(&mut cfg, "shape", s)?;
    }
    if let Some(v) = a.views {
        set(&mut cfg, "views", v)?;
    }
    if let Some(r) = a.res {
        set(&mut cfg, "image_width", r)?;
        set(&mut cfg, "image_height", r)?;
    }
    if let Some(s) = a.seed {
        set(&mut cfg, "seed", s)?;
    }
    if a.corrupt_multibounce_q {
        set(&mut cfg, "corrupt_multibounce_q", true)?;
    }
    cfg.out = Some(a.out.clone());
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    refuse_existing(&a.out, a.force)?;
    let ds = generate_dataset(&cfg.shape(), &cfg.rig, cfg.seed, &a.out)?;
    write_resolved(&cfg, &a.out)?;
    println!("{} views written to {}", ds.manifest.views.len(), a.out.display());
    println!("{}", ds.counts());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &Train) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(v) = a.iters {
        set(&mut cfg, "iterations", v)?;
    }
    if let Some(v) = a.seed {
        set(&mut cfg, "seed", v)?;
    }
    if let Some(v) = a.batch {
        set(&mut cfg, "batch_size", v)?;
    }
    if let Some(m) = &a.mode {
        set(&mut cfg, "intersect_mode", m)?;
    }
    for (flag, key) in [
        (a.no_occlusion_check, "enable_occlusion_check"),
        (a.no_eikonal, "enable_eikonal"),
        (a.no_mask, "enable_mask"),
        (a.no_refraction, "enable_refraction"),
    ] {
        if flag {
            set(&mut cfg, key, false)?;
        }
    }
    cfg.data = Some(a.data.clone());
    cfg.out = Some(a.out.clone());
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !a.resume {
        refuse_existing(&a.out, a.force)?;
        if a.force && a.out.is_dir() {
            for e in std::fs::read_dir(&a.out)?.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if name.starts_with("ckpt_") || name == "log.csv" || name == "final.neto" {
                    std::fs::remove_file(e.path())?;
                }
            }
        }
    }
    let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    std::fs::create_dir_all(&a.out)?;
    write_resolved(&cfg, &a.out)?;
    let every = (cfg.train.iterations / 20).max(1);
    let summary = train::run(&ds, cfg.train, &a.out, a.resume, |r| {
        if (r.iteration + 1) % every == 0 {
            info!(
                "iter {} total {:.6} refraction {:.6} eikonal {:.6} mask {:.6} valid {}",
                r.iteration + 1,
                r.loss.total,
                r.loss.refraction,
                r.loss.eikonal,
                r.loss.mask,
                r.counts.valid
            );
        }
    })?;
    println!(
        "trained {} iterations ({} skipped); final checkpoint {}",
        summary.iterations,
        summary.skipped_steps,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn extract(cli: &Cli, a: &Extract) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(r) = a.res {
        set(&mut cfg, "resolution", r)?;
    }
    if cfg.resolution < MIN_RESOLUTION {
        bail!(usage(format!("resolution {} is below the minimum {MIN_RESOLUTION}", cfg.resolution)));
    }
    refuse_existing(&a.out, a.force)?;
    let field = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (lo, hi) = scene_bound();
    let mesh = marching_cubes(&field, &lo, &hi, cfg.resolution)?;
    mesh.write_obj(&a.out)?;
    println!(
        "{} vertices, {} triangles, watertight {}, euler {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.is_watertight(),
        mesh.euler_characteristic()
    );
    Ok(())
}

fn eval(cli: &Cli, a: &Eval) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(t) = a.tau {
        set(&mut cfg, "tau", t)?;
    }
    if let Some(n) = a.samples {
        set(&mut cfg, "eval_samples", n)?;
    }
    if let Some(s) = a.seed {
        set(&mut cfg, "seed", s)?;
    }
    if !(cfg.tau > 0.0) || cfg.eval_samples == 0 {
        bail!(usage("tau and samples must be positive"));
    }
    if let Some(o) = &a.out {
        refuse_existing(o, a.force)?;
    }
    let recon = TriangleMesh::read_obj(&a.recon)?;
    let gt = TriangleMesh::read_obj(&a.gt)?;
    let report = evaluate(&recon, &gt, cfg.tau, cfg.eval_samples, cfg.seed)?;
    let json = report.to_json();
    println!("{json}");
    if let Some(o) = &a.out {
        std::fs::write(o, format!("{json}\n"))?;
    }
    Ok(())
}

fn trace(cli: &Cli, a: &Trace) -> Result<()> {
    let cfg = base_config(cli)?;
    let [u, v] = a.pixel[..] else { bail!(usage("--pixel takes two values: U V")) };
    let (camera, monitor, constants, occ_cfg) = match &a.data {
        Some(d) => {
            let ds = load_dataset(d)?;
            let meta = ds.manifest.views.get(a.view).ok_or_else(|| usage(format!("no view {}", a.view)))?;
            (meta.camera.clone(), meta.monitor, ds.manifest.rig.constants, cfg.train.sampling)
        }
        None => {
            cfg.rig.validate().map_err(|e| usage(e.to_string()))?;
            if a.view >= cfg.rig.n_views {
                bail!(usage(format!("no view {}", a.view)));
            }
            let cam = cfg.rig.camera(a.view);
            (cam.clone(), cfg.rig.monitor(&cam), cfg.rig.constants, cfg.train.sampling)
        }
    };
    if u >= camera.width || v >= camera.height {
        bail!(usage(format!("pixel ({u}, {v}) outside the {}x{} image", camera.width, camera.height)));
    }
    let ray = camera.pixel_center_ray(u, v);
    let text = if let Some(ck) = &a.checkpoint {
        let field: NeuralField = checkpoint::load(ck)?;
        trace_dump(&field, field.sharpness(), &ray, &monitor, constants, &occ_cfg, !a.no_occlusion_check)
    } else {
        let name = a.shape.as_deref().unwrap();
        let shape = AnalyticShape::preset(name).ok_or_else(|| usage(format!("unknown shape '{name}'")))?;
        trace_dump(&shape, a.sharpness, &ray, &monitor, constants, &occ_cfg, !a.no_occlusion_check)
    };
    print!("{text}");
    Ok(())
}

fn trace_dump<F: ScalarField>(
    field: &F,
    s: f64,
    ray: &Ray,
    monitor: &MonitorPlane,
    constants: neto_core::geometry::OpticalConstants,
    cfg: &neto_core::tracer::SamplingConfig,
    occlusion: bool,
) -> String {
    let mut path = trace_two_bounce(field, s, ray, monitor, &constants, cfg);
    if occlusion && path.status == PathStatus::ValidTwoBounce {
        let entry = path.entry_hit().unwrap().clone();
        if check_self_occlusion(field, s, &entry, &path.dir_interior.unwrap(), cfg) {
            path.status = PathStatus::SelfOccluded;
        }
    }
    let d = path.dir_interior.map(|d| format!("DIR_IN {:.9} {:.9} {:.9}\n", d.x, d.y, d.z)).unwrap_or_default();
    format!("RAY {:.9} {:.9} {:.9}\n{d}{}", ray.direction.x, ray.direction.y, ray.direction.z, path.dump())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Extract(a) => extract(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Trace(a) => trace(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
