use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use bevsplat::config::{load_config, RunConfig};
use bevsplat::grad::{grad_check, GradCheckOptions, GradScene, GradSceneSpec};
use bevsplat::harness::io::{
    read_gaussians, read_scene, write_gaussians, write_scene, GaussiansMeta,
};
use bevsplat::harness::{
    bench, chain_setup, class_scores, compute_iou, emit_pgm, evaluate_scores, gen_scene, sweep_k,
    target_grid, thread_pool, threads_from_env, SceneSpec, DISTANCE_BANDS,
};
use bevsplat::lift::{
    assemble_gaussians, filter_opacity, moments_3d, softmax_depth, PixelGaussianSet,
};
use bevsplat::multiscale::{fuse, render_multiscale, upsample};
use bevsplat::raster::{BevGrid, KernelShape};
use bevsplat::tensor::{read_tensor, write_tensor, Dtype};

#[derive(Parser)]
#[command(
    name = "bevsplat",
    version,
    about = "Gaussian lifting and BEV splatting toolkit"
)]
struct Cli {
    /// Worker thread cap; overrides BEVSPLAT_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera scene.
    GenScene {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a scene directory into filtered 3D Gaussians.
    Lift {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render Gaussians at every configured scale and fuse.
    Render {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction against a ground-truth mask.
    Eval {
        /// A binary R×C mask, or a C×R×C map whose class channel is thresholded.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_distance: f64,
        /// Supplies the BEV extent (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        scenes: u64,
    },
    /// Time every pipeline stage on a random batch.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        oracle_reps: usize,
    },
    /// IoU of the synthetic scene at each error tolerance k.
    SweepK {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.25,0.5,0.75,1,1.25,1.5,2,3,4"
        )]
        ks: Vec<f64>,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_scene_cmd(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let spec = SceneSpec::from_config(cfg)?;
    let scene = gen_scene(&spec, cfg)?;
    for w in &scene.warnings {
        eprintln!("warning: {w}");
    }
    write_scene(out, &spec, &scene)?;
    print_json(&json!({
        "cameras": spec.cameras.len(),
        "boxes": spec.boxes.len(),
        "warnings": scene.warnings,
        "out": out,
    }))?;
    Ok(true)
}

fn lift_cmd(cfg: &RunConfig, scene_dir: &Path, out: &Path) -> Result<bool> {
    let loaded = read_scene(scene_dir)?;
    let mut cfg = cfg.clone();
    cfg.rig.stride = loaded.stride;
    let setup = chain_setup(&cfg, &loaded.cameras)?;
    let sets = loaded
        .inputs
        .iter()
        .zip(&setup.frustums)
        .map(|(cam, fr)| {
            let dist = softmax_depth(&cam.depth_logits)?;
            let (mu, cov) = moments_3d(&dist, fr)?;
            assemble_gaussians(
                &mu,
                &cov,
                &cam.opacity_logits,
                &cam.features,
                fr.camera_index,
            )
        })
        .collect::<bevsplat::Result<Vec<_>>>()?;
    let all = PixelGaussianSet::concat(&sets)?;
    let filtered = filter_opacity(&all, cfg.opacity_threshold)?;
    let meta = GaussiansMeta {
        count: filtered.set.len(),
        channels: all.channels(),
        unfiltered: all.len(),
        retained_fraction: filtered.retained_fraction,
        opacity_threshold: cfg.opacity_threshold,
    };
    write_gaussians(out, &filtered.set, &meta)?;
    print_json(&meta)?;
    Ok(true)
}

fn render_cmd(cfg: &RunConfig, gaussians: &Path, out: &Path) -> Result<bool> {
    cfg.validate()?;
    let set = read_gaussians(gaussians)?;
    let grids = cfg
        .scales
        .iter()
        .map(|&s| BevGrid::from_config(&cfg.bev, s))
        .collect::<bevsplat::Result<Vec<_>>>()?;
    let shape = KernelShape::from_config(cfg);
    let scales = render_multiscale(&set, &grids, &shape)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let res = cfg.bev.resolution;
    let mut up = Vec::with_capacity(scales.len());
    let mut files = Vec::new();
    for s in &scales {
        let name = format!("scale_{}", s.grid.n_rows);
        write_tensor(&s.map.values, out.join(format!("{name}.bevt")))?;
        emit_pgm(
            &class_scores(&s.map.values)?,
            out.join(format!("{name}.pgm")),
        )?;
        files.push(name);
        up.push(upsample(&s.map, res, res, cfg.upsample)?);
    }
    let fused = fuse(&up, cfg.fuse_mode)?;
    write_tensor(&fused.values, out.join("fused.bevt"))?;
    write_tensor(&fused.weight, out.join("fused_weight.bevt"))?;
    emit_pgm(&class_scores(&fused.values)?, out.join("fused.pgm"))?;
    emit_pgm(&fused.weight, out.join("fused_weight.pgm"))?;
    print_json(&json!({
        "gaussians": set.len(),
        "channels": fused.channels(),
        "scales": files,
        "fused": out.join("fused.bevt"),
    }))?;
    Ok(true)
}

fn eval_cmd(cfg: &RunConfig, pred: &Path, gt: &Path, min_distance: f64) -> Result<bool> {
    let pred = read_tensor(pred)?.to_typed::<f64>();
    let gt = read_tensor(gt)?.to_typed::<f64>();
    let scores = match pred.rank() {
        2 => pred,
        3 => class_scores(&pred)?,
        r => bail!("prediction must be R×C or C×R×C, got rank {r}"),
    };
    let [rows, cols] = gt.dims() else {
        bail!("ground truth must be R×C, got {:?}", gt.dims());
    };
    let grid = target_grid(cfg)?.with_resolution(*rows, *cols)?;
    let mut bands: Vec<f64> = DISTANCE_BANDS.to_vec();
    if !bands.contains(&min_distance) {
        bands.push(min_distance);
        bands.sort_by(f64::total_cmp);
    }
    let (mut report, mask) = evaluate_scores(&scores, &gt, &grid, &bands)?;
    report.iou = compute_iou(&mask, &gt, &grid, min_distance)?;
    print_json(&json!({
        "min_distance": min_distance,
        "iou": report.iou,
        "threshold": report.threshold,
        "distance_band_iou": report.distance_band_iou,
        "retained_fraction": report.retained_fraction,
        "timings": report.timings,
    }))?;
    Ok(true)
}

fn grad_check_cmd(cfg: &RunConfig, dtype: DtypeArg, seed: u64, scenes: u64) -> Result<bool> {
    let spec = GradSceneSpec::from_config(cfg);
    let opts = GradCheckOptions {
        dtype: match dtype {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        },
        ..GradCheckOptions::default()
    };
    let reports = (seed..seed + scenes.max(1))
        .map(|s| grad_check(&GradScene::random(s, &spec)?, &opts))
        .collect::<bevsplat::Result<Vec<_>>>()?;
    let report = bevsplat::grad::GradCheckReport::merge(&reports).context("no scenes checked")?;
    for g in &report.groups {
        eprintln!(
            "{:<16} max rel-err {:.3e} ({} checked, {} excluded)",
            g.group, g.max_rel_err, g.checked, g.excluded
        );
    }
    let passed = report.passed();
    print_json(&json!({
        "seed": seed,
        "scenes": scenes.max(1),
        "passed": passed,
        "report": report,
    }))?;
    Ok(passed)
}

fn sweep_k_cmd(cfg: &RunConfig, ks: &[f64]) -> Result<bool> {
    if ks.is_empty() {
        bail!("--ks needs at least one value");
    }
    let spec = SceneSpec::from_config(cfg)?;
    let scene = gen_scene(&spec, cfg)?;
    let pairs = sweep_k::<f32>(cfg, &spec.cameras, &scene, ks)?;
    print_json(&pairs)?;
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let threads = match cli.threads {
        Some(0) => bail!("--threads must be positive"),
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let pool = thread_pool(threads)?;
    pool.install(|| match &cli.command {
        Command::GenScene { config: c, out } => gen_scene_cmd(&config(c.as_deref())?, out),
        Command::Lift {
            config: c,
            scene,
            out,
        } => lift_cmd(&config(c.as_deref())?, scene, out),
        Command::Render {
            config: c,
            gaussians,
            out,
        } => render_cmd(&config(c.as_deref())?, gaussians, out),
        Command::Eval {
            pred,
            gt,
            min_distance,
            config: c,
        } => eval_cmd(&config(c.as_deref())?, pred, gt, *min_distance),
        Command::GradCheck {
            config: c,
            dtype,
            seed,
            scenes,
        } => grad_check_cmd(&config(c.as_deref())?, *dtype, *seed, *scenes),
        Command::Bench {
            config: c,
            n,
            channels,
            reps,
            oracle_reps,
        } => {
            let report = bench(&config(c.as_deref())?, *n, *channels, *reps, *oracle_reps)?;
            print_json(&report)?;
            Ok(true)
        }
        Command::SweepK { config: c, ks } => sweep_k_cmd(&config(c.as_deref())?, ks),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
