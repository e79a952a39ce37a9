//! Stage timings on random lift batches, plus the reference renderer for a
//! speedup ratio.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::scene::build_rig;
use crate::camera::{build_frustum, make_bins, CameraModel, Frustum};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grad::CameraInputs;
use crate::lift::{
    assemble_gaussians, filter_opacity, moments_3d, softmax_depth, PixelGaussianSet,
};
use crate::multiscale::{fuse, upsample};
use crate::raster::{
    project_set, splat_forward, splat_oracle, BevGaussian2D, BevGrid, Features, KernelShape,
};
use crate::tensor::Tensor;

/// Random lift inputs for `n` Gaussians on the configured camera ring. The
/// feature grid keeps the rig's height and is widened until it holds at
/// least `n` pixels; each depth distribution is a discretized Gaussian with
/// a random centre and a spread of 0.5–3 bins.
#[derive(Debug, Clone)]
pub struct LiftBatch {
    pub cameras: Vec<CameraModel>,
    pub frustums: Vec<Frustum>,
    pub inputs: Vec<CameraInputs<f32>>,
    pub n: usize,
}

pub fn random_batch(cfg: &RunConfig, n: usize, channels: usize, seed: u64) -> Result<LiftBatch> {
    if n == 0 || channels == 0 {
        return Err(Error::InvalidArgument(
            "bench needs n ≥ 1 and channels ≥ 1".into(),
        ));
    }
    let mut rig = cfg.rig.clone();
    let h = rig.image_height / rig.stride;
    let w = n.div_ceil(rig.count * h).max(1);
    // Keep the angular pixel pitch of the configured rig.
    let pitch = rig.hfov_deg / rig.image_width as f64;
    rig.image_width = w * rig.stride;
    rig.hfov_deg = (pitch * rig.image_width as f64).min(170.0);
    let cameras = build_rig(&rig)?;
    let bins = make_bins(cfg.depth.d_min, cfg.depth.d_max, cfg.depth.bins)?;
    let frustums = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| build_frustum(c, &bins, rig.stride, i))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = bins.len();
    let inputs = (0..rig.count)
        .map(|_| {
            let mut logits = vec![0f32; b * h * w];
            for p in 0..h * w {
                let centre = rng.random_range(0.0..b as f64);
                let spread: f64 = rng.random_range(0.5..3.0);
                for i in 0..b {
                    let z = (i as f64 - centre) / spread;
                    logits[i * h * w + p] = (-0.5 * z * z) as f32;
                }
            }
            let opacity = (0..h * w).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let features = (0..channels * h * w)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Ok(CameraInputs {
                depth_logits: Tensor::new(vec![b, h, w], logits)?,
                opacity_logits: Tensor::new(vec![h, w], opacity)?,
                features: Tensor::new(vec![channels, h, w], features)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LiftBatch {
        cameras,
        frustums,
        inputs,
        n,
    })
}

/// Lift a batch and keep its first `n` Gaussians.
pub fn lift_batch(batch: &LiftBatch) -> Result<PixelGaussianSet<f32>> {
    let sets = batch
        .inputs
        .iter()
        .zip(&batch.frustums)
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
        .collect::<Result<Vec<_>>>()?;
    let all = PixelGaussianSet::concat(&sets)?;
    Ok(all.select(&(0..batch.n.min(all.len())).collect::<Vec<_>>()))
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock milliseconds of `f` over `reps` runs after one warm-up.
pub fn time_median<R>(reps: usize, mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n_gaussians: usize,
    pub channels: usize,
    pub resolution: usize,
    pub scales: Vec<usize>,
    pub reps: usize,
    pub oracle_reps: usize,
    pub threads: usize,
    /// Median milliseconds per stage.
    pub stages: BTreeMap<String, f64>,
    /// Median milliseconds of a whole pass (all stages).
    pub total_ms: f64,
    /// Median milliseconds of the reference renderer at the finest scale.
    pub oracle_render_ms: f64,
    /// `oracle_render_ms` over the tiled render time at the finest scale.
    pub speedup: f64,
}

fn stage(times: &mut BTreeMap<String, Vec<f64>>, name: &str, t: Instant) {
    times
        .entry(name.to_string())
        .or_default()
        .push(t.elapsed().as_secs_f64() * 1e3);
}

/// Time every stage of the pipeline over `reps` warm repetitions (medians),
/// and the reference renderer at the finest scale over `oracle_reps`.
pub fn bench(
    cfg: &RunConfig,
    n: usize,
    channels: usize,
    reps: usize,
    oracle_reps: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    let batch = random_batch(cfg, n, channels, cfg.seed)?;
    let shape = KernelShape::from_config(cfg);
    let grids: Vec<BevGrid> = cfg
        .scales
        .iter()
        .map(|&s| BevGrid::from_config(&cfg.bev, s))
        .collect::<Result<_>>()?;
    let res = cfg.bev.resolution;

    let mut times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut totals = Vec::new();
    let mut finest: Option<(Vec<BevGaussian2D>, PixelGaussianSet<f32>, BevGrid)> = None;
    for rep in 0..=reps.max(1) {
        let mut local = BTreeMap::new();
        let start = Instant::now();
        let t = Instant::now();
        let lifted = lift_batch(&batch)?;
        stage(&mut local, "lift", t);
        let t = Instant::now();
        let filtered = filter_opacity(&lifted, cfg.opacity_threshold)?;
        stage(&mut local, "filter", t);
        let features = Features::from_set(&filtered.set);
        let mut maps = Vec::new();
        for grid in &grids {
            let t = Instant::now();
            let gs = project_set(&filtered.set, grid, &shape)?;
            stage(&mut local, &format!("project_{}", grid.n_rows), t);
            let t = Instant::now();
            maps.push(splat_forward(&gs, &features, grid)?);
            stage(&mut local, &format!("render_{}", grid.n_rows), t);
            if grid.n_rows == res && finest.is_none() {
                finest = Some((gs, filtered.set.clone(), *grid));
            }
        }
        let t = Instant::now();
        let up = maps
            .iter()
            .map(|m| upsample(m, res, res, cfg.upsample))
            .collect::<Result<Vec<_>>>()?;
        std::hint::black_box(fuse(&up, cfg.fuse_mode)?);
        stage(&mut local, "fuse", t);
        let total = start.elapsed().as_secs_f64() * 1e3;
        // Rep 0 is the warm-up.
        if rep > 0 {
            totals.push(total);
            for (k, v) in local {
                times.entry(k).or_default().extend(v);
            }
        }
    }
    let stages: BTreeMap<String, f64> = times.into_iter().map(|(k, v)| (k, median(v))).collect();

    let (gs, set, grid) = match finest {
        Some(f) => f,
        None => {
            let set = lift_batch(&batch)?;
            let grid = BevGrid::from_config(&cfg.bev, res)?;
            (project_set(&set, &grid, &shape)?, set, grid)
        }
    };
    let features = Features::from_set(&set);
    let oracle_render_ms = time_median(oracle_reps, || splat_oracle(&gs, &features, &grid))?;
    let tiled_ms = match stages.get(&format!("render_{res}")) {
        Some(&ms) => ms,
        None => time_median(reps, || splat_forward(&gs, &features, &grid))?,
    };
    Ok(BenchReport {
        n_gaussians: set.len(),
        channels,
        resolution: res,
        scales: cfg.scales.clone(),
        reps: reps.max(1),
        oracle_reps: oracle_reps.max(1),
        threads: rayon::current_num_threads(),
        stages,
        total_ms: median(totals),
        oracle_render_ms,
        speedup: oracle_render_ms / tiled_ms,
    })
}
