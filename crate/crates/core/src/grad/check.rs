use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::chain::{
    backward_chain, chain_loss, forward_chain, CameraInputs, ChainForward, ChainSetup,
};
use crate::camera::{build_frustum, make_bins, CameraModel};
use crate::config::{FuseMode, KernelMode, RunConfig, UpsampleMode};
use crate::error::{Error, Result};
use crate::raster::{BevGrid, KernelShape};
use crate::tensor::{Dtype, Element, Tensor};

/// A small, fully specified chain instance with a random linear loss.
#[derive(Debug, Clone)]
pub struct GradScene {
    pub setup: ChainSetup,
    pub cams: Vec<CameraInputs<f64>>,
    /// Loss weights, same shape as the fused map.
    pub weights: Tensor<f64>,
}

/// Knobs for [`GradScene::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSceneSpec {
    pub k: f64,
    pub kernel: KernelMode,
    pub cov_eps: f64,
    pub fuse: FuseMode,
    pub upsample: UpsampleMode,
    pub opacity_threshold: f64,
    pub channels: usize,
    pub cameras: usize,
    pub bins: usize,
}

impl Default for GradSceneSpec {
    fn default() -> Self {
        GradSceneSpec {
            k: 1.0,
            kernel: KernelMode::Truncate,
            cov_eps: 1.0,
            fuse: FuseMode::Sum,
            upsample: UpsampleMode::Bilinear,
            opacity_threshold: 0.01,
            channels: 3,
            cameras: 2,
            bins: 8,
        }
    }
}

impl GradSceneSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        GradSceneSpec {
            k: cfg.k,
            kernel: cfg.kernel,
            cov_eps: cfg.cov_eps,
            fuse: cfg.fuse_mode,
            upsample: cfg.upsample,
            opacity_threshold: cfg.opacity_threshold,
            channels: cfg.scene.channels.clamp(1, 8),
            ..GradSceneSpec::default()
        }
    }
}

const GRAD_IMAGE: (usize, usize) = (24, 32);
const GRAD_STRIDE: usize = 8;

impl GradScene {
    /// Cameras 1.5 m up looking outwards at 90° spacing, 3×4 feature pixels
    /// each, depth 2–12 m, BEV ±12 m rendered at 12 and 24 cells.
    pub fn random(seed: u64, spec: &GradSceneSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = make_bins(2.0, 12.0, spec.bins)?;
        let (ih, iw) = GRAD_IMAGE;
        let f = (iw as f64 / 2.0) / 35f64.to_radians().tan();
        let intr = CameraModel::pinhole(f, f, iw as f64 / 2.0, ih as f64 / 2.0);
        let frustums = (0..spec.cameras)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.2..0.2);
                let ext = CameraModel::look_extrinsics(Vector3::new(0.0, 0.0, 1.5), yaw, -0.15);
                let cam = CameraModel::new(intr, ext, GRAD_IMAGE)?;
                build_frustum(&cam, &bins, GRAD_STRIDE, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = BevGrid::new(-12.0, 12.0, -12.0, 12.0, 24, 24)?;
        let setup = ChainSetup {
            grids: vec![grid.with_resolution(12, 12)?, grid],
            target: (24, 24),
            shape: KernelShape {
                mode: spec.kernel,
                k: spec.k,
                eps: spec.cov_eps,
            },
            opacity_threshold: spec.opacity_threshold,
            fuse: spec.fuse,
            upsample: spec.upsample,
            frustums,
        };
        let (h, w) = (ih / GRAD_STRIDE, iw / GRAD_STRIDE);
        let normal = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut cams = Vec::new();
        for _ in 0..spec.cameras {
            let depth = normal(&mut rng, spec.bins * h * w, 1.5);
            let features = normal(&mut rng, spec.channels * h * w, 1.0);
            // Within ±3 the 0.01 opacity filter never flips under a perturbation.
            let opacity = (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
            cams.push(CameraInputs {
                depth_logits: Tensor::new(vec![spec.bins, h, w], depth)?,
                opacity_logits: Tensor::new(vec![h, w], opacity)?,
                features: Tensor::new(vec![spec.channels, h, w], features)?,
            });
        }
        let out_channels = match spec.fuse {
            FuseMode::Sum => spec.channels,
            FuseMode::Concat => spec.channels * setup.grids.len(),
        };
        let weights = Tensor::new(
            vec![out_channels, 24, 24],
            normal(&mut rng, out_channels * 576, 1.0),
        )?;
        Ok(GradScene {
            setup,
            cams,
            weights,
        })
    }

    pub fn cams_as<T: Element>(&self) -> Vec<CameraInputs<T>> {
        self.cams
            .iter()
            .map(|c| CameraInputs {
                depth_logits: c.depth_logits.cast(),
                opacity_logits: c.opacity_logits.cast(),
                features: c.features.cast(),
            })
            .collect()
    }

    pub fn gaussian_count(&self) -> usize {
        self.setup
            .frustums
            .iter()
            .map(|f| f.height() * f.width())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Relative step: `h_eff = h·max(1, |θ|)`.
    pub h: f64,
    /// Precision of the analytic pass. The finite-difference reference is
    /// always evaluated in f64 on the same (dtype-rounded) inputs.
    pub dtype: Dtype,
    /// Entries with `max(|analytic|, |fd|)` below `floor·max_group|analytic|`
    /// are compared against that floor instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-3,
            dtype: Dtype::F64,
            floor: 1e-3,
        }
    }
}

impl GradCheckOptions {
    pub fn tolerance(&self) -> f64 {
        match self.dtype {
            Dtype::F32 => 1e-3,
            Dtype::F64 => 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Entries skipped because a perturbation moved a cell across a
    /// truncation boundary or changed the opacity filter.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub dtype: String,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.groups.iter().map(|g| g.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// Merge reports of the same dtype (counts add, maxima combine).
    pub fn merge(reports: &[GradCheckReport]) -> Option<GradCheckReport> {
        let first = reports.first()?;
        let mut groups = first.groups.clone();
        for r in &reports[1..] {
            for (g, o) in groups.iter_mut().zip(&r.groups) {
                let total = g.checked + o.checked;
                if total > 0 {
                    g.mean_rel_err = (g.mean_rel_err * g.checked as f64
                        + o.mean_rel_err * o.checked as f64)
                        / total as f64;
                }
                g.checked = total;
                g.excluded += o.excluded;
                g.max_rel_err = g.max_rel_err.max(o.max_rel_err);
                g.max_abs_err = g.max_abs_err.max(o.max_abs_err);
            }
        }
        Some(GradCheckReport {
            dtype: first.dtype.clone(),
            tolerance: first.tolerance,
            groups,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Features,
    Opacity,
    Depth,
}

const GROUPS: [(Group, &str); 3] = [
    (Group::Features, "features"),
    (Group::Opacity, "opacity_logits"),
    (Group::Depth, "depth_logits"),
];

fn input_mut(cam: &mut CameraInputs<f64>, group: Group) -> &mut Tensor<f64> {
    match group {
        Group::Features => &mut cam.features,
        Group::Opacity => &mut cam.opacity_logits,
        Group::Depth => &mut cam.depth_logits,
    }
}

fn input(cam: &CameraInputs<f64>, group: Group) -> &Tensor<f64> {
    match group {
        Group::Features => &cam.features,
        Group::Opacity => &cam.opacity_logits,
        Group::Depth => &cam.depth_logits,
    }
}

/// Which Gaussian–cell pairs pass the truncation test at every scale, and
/// which Gaussians survive the opacity filter.
fn active_signature<T: Element>(fwd: &ChainForward<T>) -> u64 {
    let mut h = DefaultHasher::new();
    fwd.filtered.kept.hash(&mut h);
    for (s, scale) in fwd.scales.iter().enumerate() {
        for g in &scale.gaussians {
            let Some((r0, r1, c0, c1)) = g.cell_bounds(&scale.grid) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if g.kernel(c as f64 + 0.5, r as f64 + 0.5).is_some() {
                        (s, g.feature_index, r, c).hash(&mut h);
                    }
                }
            }
        }
    }
    h.finish()
}

fn evaluate(scene: &GradScene, cams: &[CameraInputs<f64>]) -> Result<(f64, u64)> {
    let fwd = forward_chain(&scene.setup, cams)?;
    Ok((chain_loss(&fwd, &scene.weights), active_signature(&fwd)))
}

fn round_inputs(cams: &mut [CameraInputs<f64>], dtype: Dtype) {
    if dtype == Dtype::F32 {
        for cam in cams {
            for t in [
                &mut cam.depth_logits,
                &mut cam.opacity_logits,
                &mut cam.features,
            ] {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

/// Map an input-tensor flat index to the matching gradient-buffer flat index.
fn grad_index(group: Group, idx: usize, channels: usize, pixels: usize) -> usize {
    match group {
        // Input C×H×W, gradient N×C.
        Group::Features => (idx % pixels) * channels + idx / pixels,
        Group::Opacity | Group::Depth => idx,
    }
}

/// Central finite differences on every scalar input (features, opacity
/// logits, depth logits of every camera) against the analytic chain.
///
/// f64 uses the fourth-order stencil `(−f(+2h) + 8f(+h) − 8f(−h) + f(−2h)) / 12h`;
/// f32 inputs are rounded first and use the two-point stencil on the realized
/// step. An entry is excluded when the truncation/filter signature at any
/// stencil point differs from the unperturbed one.
pub fn grad_check(scene: &GradScene, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h = {} must be positive",
            opts.h
        )));
    }
    let mut base = scene.cams.clone();
    round_inputs(&mut base, opts.dtype);
    let rounded = GradScene {
        cams: base.clone(),
        ..scene.clone()
    };

    // Analytic pass at the requested precision, widened for comparison.
    let analytic: Vec<[Vec<f64>; 3]> = match opts.dtype {
        Dtype::F64 => analytic_grads::<f64>(&rounded)?,
        Dtype::F32 => analytic_grads::<f32>(&rounded)?,
    };
    let (_, base_sig) = evaluate(&rounded, &base)?;

    let mut groups = Vec::new();
    for (gi, (group, name)) in GROUPS.iter().enumerate() {
        let mut entries = Vec::new();
        for (ci, cam) in base.iter().enumerate() {
            for idx in 0..input(cam, *group).len() {
                entries.push((ci, idx));
            }
        }
        let results: Vec<Option<(f64, f64)>> = entries
            .par_iter()
            .map(|&(ci, idx)| -> Result<Option<(f64, f64)>> {
                let theta = input(&base[ci], *group).data()[idx];
                let step = opts.h * theta.abs().max(1.0);
                let at = |delta: f64| -> Result<(f64, u64, f64)> {
                    let mut cams = base.clone();
                    let t = input_mut(&mut cams[ci], *group);
                    let mut v = theta + delta;
                    if opts.dtype == Dtype::F32 {
                        v = v as f32 as f64;
                    }
                    t.data_mut()[idx] = v;
                    let (loss, sig) = evaluate(&rounded, &cams)?;
                    Ok((loss, sig, v - theta))
                };
                let fd = match opts.dtype {
                    Dtype::F64 => {
                        let pts = [at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?];
                        if pts.iter().any(|p| p.1 != base_sig) {
                            return Ok(None);
                        }
                        (-pts[0].0 + 8.0 * pts[1].0 - 8.0 * pts[2].0 + pts[3].0) / (12.0 * step)
                    }
                    Dtype::F32 => {
                        let (p, m) = (at(step)?, at(-step)?);
                        if p.1 != base_sig || m.1 != base_sig {
                            return Ok(None);
                        }
                        (p.0 - m.0) / (p.2 - m.2)
                    }
                };
                let cam = &base[ci];
                let pixels = cam.opacity_logits.len();
                let channels = cam.features.dims()[0];
                let a = analytic[ci][gi][grad_index(*group, idx, channels, pixels)];
                Ok(Some((a, fd)))
            })
            .collect::<Result<_>>()?;

        let scale = results
            .iter()
            .flatten()
            .map(|(a, _)| a.abs())
            .fold(0.0, f64::max);
        let floor = opts.floor * scale;
        let mut report = GroupReport {
            group: name.to_string(),
            checked: 0,
            excluded: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        let mut sum = 0.0;
        for r in &results {
            let Some((a, fd)) = r else {
                report.excluded += 1;
                continue;
            };
            let diff = (a - fd).abs();
            let rel = if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(fd.abs()).max(floor)
            };
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max(diff);
            sum += rel;
        }
        if report.checked > 0 {
            report.mean_rel_err = sum / report.checked as f64;
        }
        groups.push(report);
    }
    Ok(GradCheckReport {
        dtype: opts.dtype.to_string(),
        tolerance: opts.tolerance(),
        groups,
    })
}

fn analytic_grads<T: Element>(scene: &GradScene) -> Result<Vec<[Vec<f64>; 3]>> {
    let cams = scene.cams_as::<T>();
    let fwd = forward_chain(&scene.setup, &cams)?;
    let grads = backward_chain(&scene.setup, &cams, &fwd, &scene.weights)?;
    Ok(grads
        .iter()
        .map(|g| {
            [
                g.d_features.to_f64_vec(),
                g.d_opacity_logits.to_f64_vec(),
                g.d_depth_logits.to_f64_vec(),
            ]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scene_is_small() {
        let s = GradScene::random(1, &GradSceneSpec::default()).unwrap();
        assert_eq!(s.gaussian_count(), 24);
        assert!(s.gaussian_count() <= 200);
    }

    #[test]
    fn f64_check_passes_on_a_random_scene() {
        let s = GradScene::random(7, &GradSceneSpec::default()).unwrap();
        let r = grad_check(&s, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(r.groups.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn zero_loss_gives_zero_error() {
        let mut s = GradScene::random(3, &GradSceneSpec::default()).unwrap();
        s.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let r = grad_check(&s, &GradCheckOptions::default()).unwrap();
        assert!(r
            .groups
            .iter()
            .all(|g| g.max_rel_err == 0.0 && g.max_abs_err == 0.0));
    }

    #[test]
    fn boundary_crossings_are_excluded() {
        // Put a truncation edge exactly on a cell centre: take the
        // Mahalanobis distance of an active pair as the new cutoff.
        let mut s = GradScene::random(
            11,
            &GradSceneSpec {
                k: 2.0,
                ..GradSceneSpec::default()
            },
        )
        .unwrap();
        let fwd = forward_chain(&s.setup, &s.cams).unwrap();
        let scale = &fwd.scales[1];
        let g = scale
            .gaussians
            .iter()
            .find(|g| {
                g.kernel(g.mean.x.floor() + 1.5, g.mean.y.floor() + 0.5)
                    .is_some()
            })
            .expect("an active gaussian");
        let q = g.mahalanobis_sq(g.mean.x.floor() + 1.5, g.mean.y.floor() + 0.5);
        s.setup.shape.k = q.sqrt();
        let r = grad_check(&s, &GradCheckOptions::default()).unwrap();
        assert!(r.excluded() > 0, "{r:#?}");
    }
}
