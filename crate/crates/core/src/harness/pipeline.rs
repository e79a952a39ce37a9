use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::camera::{build_frustum, make_bins, CameraModel};
use crate::config::{FuseMode, RunConfig};
use crate::error::{Error, Result};
use crate::grad::{forward_chain, CameraInputs, ChainForward, ChainSetup};
use crate::raster::{BevGrid, KernelShape};
use crate::tensor::{Element, Tensor};

/// Minimum distances (m) of the default distance bands.
pub const DISTANCE_BANDS: [f64; 5] = [0.0, 10.0, 20.0, 30.0, 40.0];

/// The fused map's grid (target resolution).
pub fn target_grid(cfg: &RunConfig) -> Result<BevGrid> {
    BevGrid::from_config(&cfg.bev, cfg.bev.resolution)
}

pub fn chain_setup(cfg: &RunConfig, cameras: &[CameraModel]) -> Result<ChainSetup> {
    cfg.validate()?;
    let bins = make_bins(cfg.depth.d_min, cfg.depth.d_max, cfg.depth.bins)?;
    let frustums = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| build_frustum(cam, &bins, cfg.rig.stride, i))
        .collect::<Result<_>>()?;
    let grids = cfg
        .scales
        .iter()
        .map(|&s| BevGrid::from_config(&cfg.bev, s))
        .collect::<Result<_>>()?;
    Ok(ChainSetup {
        frustums,
        grids,
        target: (cfg.bev.resolution, cfg.bev.resolution),
        shape: KernelShape::from_config(cfg),
        opacity_threshold: cfg.opacity_threshold,
        fuse: cfg.fuse_mode,
        upsample: cfg.upsample,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    /// Cells with class response `≥ threshold` are predicted; `None` when
    /// predicting nothing scores best.
    pub threshold: Option<f64>,
    /// `(min_distance m, iou)` pairs.
    pub distance_band_iou: Vec<(f64, f64)>,
    pub retained_fraction: f64,
    pub timings: BTreeMap<String, f64>,
    /// The fusion operator; both choices are linear stand-ins for a learned
    /// decoder.
    pub fusion: String,
}

pub fn fusion_label(mode: FuseMode) -> String {
    match mode {
        FuseMode::Sum => "sum (linear stand-in for a learned decoder)".into(),
        FuseMode::Concat => "concat (linear stand-in for a learned decoder)".into(),
    }
}

fn check_same_shape<A: Element, B: Element>(pred: &Tensor<A>, gt: &Tensor<B>) -> Result<()> {
    if pred.dims() != gt.dims() || pred.rank() != 2 {
        return Err(Error::Shape(format!(
            "masks {:?} and {:?} must share an R×C shape",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

fn far_enough(grid: &BevGrid, cell: usize, min_distance: f64) -> bool {
    let (x, y) = grid.cell_center(cell / grid.n_cols, cell % grid.n_cols);
    (x * x + y * y).sqrt() >= min_distance
}

/// IoU of two binary masks (non-zero = set), ignoring cells whose centre is
/// closer than `min_distance` to the ego origin. An empty union scores 1.
pub fn compute_iou<A: Element, B: Element>(
    pred: &Tensor<A>,
    gt: &Tensor<B>,
    grid: &BevGrid,
    min_distance: f64,
) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.dims() != [grid.n_rows, grid.n_cols] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match grid {}×{}",
            pred.dims(),
            grid.n_rows,
            grid.n_cols
        )));
    }
    if !(min_distance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "min_distance {min_distance} < 0"
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (p, g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let (p, g) = (p.to_f64() != 0.0, g.to_f64() != 0.0);
        if (p || g) && far_enough(grid, i, min_distance) {
            union += 1;
            inter += (p && g) as usize;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Pick the threshold on `scores` that maximizes IoU against `gt`
/// (prediction = `score ≥ threshold`, positive scores only). Ties go to the
/// higher threshold.
pub fn best_threshold<A: Element, B: Element>(
    scores: &Tensor<A>,
    gt: &Tensor<B>,
) -> Result<(Option<f64>, f64)> {
    check_same_shape(scores, gt)?;
    let gt_total = gt.data().iter().filter(|g| g.to_f64() != 0.0).count();
    let mut cells: Vec<(f64, bool)> = scores
        .data()
        .iter()
        .zip(gt.data())
        .map(|(s, g)| (s.to_f64(), g.to_f64() != 0.0))
        .filter(|(s, _)| *s > 0.0)
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = (None, if gt_total == 0 { 1.0 } else { 0.0 });
    let (mut inter, mut count) = (0usize, 0usize);
    let mut i = 0;
    while i < cells.len() {
        let t = cells[i].0;
        while i < cells.len() && cells[i].0 == t {
            inter += cells[i].1 as usize;
            count += 1;
            i += 1;
        }
        let iou = inter as f64 / (gt_total + count - inter) as f64;
        if iou > best.1 {
            best = (Some(t), iou);
        }
    }
    Ok(best)
}

pub fn threshold_mask<A: Element>(scores: &Tensor<A>, threshold: Option<f64>) -> Tensor<f32> {
    let data = scores
        .data()
        .iter()
        .map(|s| match threshold {
            Some(t) if s.to_f64() >= t => 1.0,
            _ => 0.0,
        })
        .collect();
    Tensor::new(scores.dims().to_vec(), data).expect("same shape")
}

/// Full evaluation of a score map against a ground-truth mask.
pub fn evaluate_scores<A: Element, B: Element>(
    scores: &Tensor<A>,
    gt: &Tensor<B>,
    grid: &BevGrid,
    bands: &[f64],
) -> Result<(EvalReport, Tensor<f32>)> {
    let (threshold, iou) = best_threshold(scores, gt)?;
    let pred = threshold_mask(scores, threshold);
    let distance_band_iou = bands
        .iter()
        .map(|&d| Ok((d, compute_iou(&pred, gt, grid, d)?)))
        .collect::<Result<_>>()?;
    Ok((
        EvalReport {
            iou,
            threshold,
            distance_band_iou,
            retained_fraction: 1.0,
            timings: BTreeMap::new(),
            fusion: String::new(),
        },
        pred,
    ))
}

/// Class-channel plane (channel 0) of a `C × R × C` map.
pub fn class_scores<T: Element>(values: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, r, c] = values.dims() else {
        return Err(Error::Shape(format!(
            "expected C×R×C map, got {:?}",
            values.dims()
        )));
    };
    Tensor::new(vec![*r, *c], values.data()[..r * c].to_vec())
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub forward: ChainForward<T>,
    pub report: EvalReport,
    pub prediction: Tensor<f32>,
}

pub fn scene_inputs<T: Element>(scene: &Scene) -> Vec<CameraInputs<T>> {
    scene
        .inputs
        .iter()
        .map(|c| CameraInputs {
            depth_logits: c.depth_logits.cast(),
            opacity_logits: c.opacity_logits.cast(),
            features: c.features.cast(),
        })
        .collect()
}

/// softmax → moments → assemble → filter → multi-scale render → fuse, then
/// score the class channel against the scene's ground truth.
pub fn run_pipeline<T: Element>(
    cfg: &RunConfig,
    cameras: &[CameraModel],
    scene: &Scene,
) -> Result<PipelineOutput<T>> {
    let total = Instant::now();
    let t = Instant::now();
    let setup = chain_setup(cfg, cameras)?;
    let setup_ms = t.elapsed().as_secs_f64() * 1e3;
    let forward = forward_chain(&setup, &scene_inputs::<T>(scene))?;
    let grid = target_grid(cfg)?;
    let t = Instant::now();
    let scores = class_scores(&forward.fused.values)?;
    let (mut report, prediction) =
        evaluate_scores(&scores, &scene.gt_mask, &grid, &DISTANCE_BANDS)?;
    report.retained_fraction = forward.filtered.retained_fraction;
    report.timings = forward.timings.clone();
    report.timings.insert("setup".into(), setup_ms);
    report
        .timings
        .insert("eval".into(), t.elapsed().as_secs_f64() * 1e3);
    report
        .timings
        .insert("total".into(), total.elapsed().as_secs_f64() * 1e3);
    report.fusion = fusion_label(cfg.fuse_mode);
    Ok(PipelineOutput {
        forward,
        report,
        prediction,
    })
}

/// IoU of the pipeline at each `k`, everything else fixed.
pub fn sweep_k<T: Element>(
    cfg: &RunConfig,
    cameras: &[CameraModel],
    scene: &Scene,
    ks: &[f64],
) -> Result<Vec<(f64, f64)>> {
    ks.iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.k = k;
            Ok((k, run_pipeline::<T>(&c, cameras, scene)?.report.iou))
        })
        .collect()
}
