use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{moments_backward, project_backward, softmax_backward, splat_backward};
use crate::camera::Frustum;
use crate::config::{FuseMode, UpsampleMode};
use crate::error::{Error, Result};
use crate::lift::{
    assemble_gaussians, filter_opacity, logistic, moments_3d, pixel_moments, softmax_depth,
    DepthDistribution, Filtered, PixelGaussianSet,
};
use crate::multiscale::{
    fuse, fuse_backward, render_multiscale, upsample, upsample_backward, ScaleRender,
};
use crate::raster::{BevFeatureMap, BevGrid, Features, KernelShape};
use crate::tensor::{Element, Tensor};

/// Everything about the chain that is not a differentiable input.
#[derive(Debug, Clone)]
pub struct ChainSetup {
    /// One frustum per camera; camera `i` uses `frustums[i]`.
    pub frustums: Vec<Frustum>,
    /// Render grids, one per scale, sharing a metric extent.
    pub grids: Vec<BevGrid>,
    /// Resolution of the fused map (rows, cols).
    pub target: (usize, usize),
    pub shape: KernelShape,
    pub opacity_threshold: f64,
    pub fuse: FuseMode,
    pub upsample: UpsampleMode,
}

/// Differentiable per-camera inputs.
#[derive(Debug, Clone)]
pub struct CameraInputs<T> {
    /// `B × H × W`.
    pub depth_logits: Tensor<T>,
    /// `H × W`.
    pub opacity_logits: Tensor<T>,
    /// `C × H × W`.
    pub features: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ChainForward<T> {
    pub dists: Vec<DepthDistribution<T>>,
    /// All cameras' Gaussians before filtering, camera-major, row-major pixels.
    pub lifted: PixelGaussianSet<T>,
    pub filtered: Filtered<T>,
    pub scales: Vec<ScaleRender<T>>,
    pub fused: BevFeatureMap<T>,
    /// Wall-clock milliseconds per stage.
    pub timings: BTreeMap<String, f64>,
}

/// Gradients for one camera's inputs. `N = H × W`.
#[derive(Debug, Clone)]
pub struct GradBuffers<T> {
    /// `N × C`.
    pub d_features: Tensor<T>,
    /// `H × W`.
    pub d_opacity_logits: Tensor<T>,
    /// `B × H × W`.
    pub d_depth_logits: Tensor<T>,
    /// `N × 3`.
    pub d_mu3d: Tensor<T>,
    /// `N × 3 × 3`.
    pub d_cov3d: Tensor<T>,
}

impl<T: Element> GradBuffers<T> {
    pub fn all_finite(&self) -> bool {
        self.d_features.all_finite()
            && self.d_opacity_logits.all_finite()
            && self.d_depth_logits.all_finite()
            && self.d_mu3d.all_finite()
            && self.d_cov3d.all_finite()
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn check_inputs<T: Element>(setup: &ChainSetup, cams: &[CameraInputs<T>]) -> Result<()> {
    if cams.len() != setup.frustums.len() {
        return Err(Error::Shape(format!(
            "{} camera inputs for {} frustums",
            cams.len(),
            setup.frustums.len()
        )));
    }
    let channels = cams
        .first()
        .map(|c| c.features.dims().first().copied().unwrap_or(0));
    for (cam, fr) in cams.iter().zip(&setup.frustums) {
        let (h, w, b) = (fr.height(), fr.width(), fr.bins());
        if cam.depth_logits.dims() != [b, h, w]
            || cam.opacity_logits.dims() != [h, w]
            || cam.features.rank() != 3
            || cam.features.dims()[1..] != [h, w]
            || Some(cam.features.dims()[0]) != channels
        {
            return Err(Error::Shape(format!(
                "camera {} inputs {:?}/{:?}/{:?} do not match frustum {h}×{w}×{b}",
                fr.camera_index,
                cam.depth_logits.dims(),
                cam.opacity_logits.dims(),
                cam.features.dims()
            )));
        }
    }
    Ok(())
}

/// Softmax → moments → assemble → filter → multi-scale render → upsample → fuse.
pub fn forward_chain<T: Element>(
    setup: &ChainSetup,
    cams: &[CameraInputs<T>],
) -> Result<ChainForward<T>> {
    check_inputs(setup, cams)?;
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let per_camera: Vec<(DepthDistribution<T>, PixelGaussianSet<T>)> = cams
        .iter()
        .zip(&setup.frustums)
        .map(|(cam, fr)| {
            let dist = softmax_depth(&cam.depth_logits)?;
            let (mu, cov) = moments_3d(&dist, fr)?;
            let gs = assemble_gaussians(
                &mu,
                &cov,
                &cam.opacity_logits,
                &cam.features,
                fr.camera_index,
            )?;
            Ok((dist, gs))
        })
        .collect::<Result<_>>()?;
    let (dists, sets): (Vec<_>, Vec<_>) = per_camera.into_iter().unzip();
    let lifted = if sets.is_empty() {
        PixelGaussianSet::empty(1)
    } else {
        PixelGaussianSet::concat(&sets)?
    };
    timings.insert("lift".to_string(), ms_since(t));

    let t = Instant::now();
    let filtered = filter_opacity(&lifted, setup.opacity_threshold)?;
    timings.insert("filter".to_string(), ms_since(t));

    let t = Instant::now();
    let scales = render_multiscale(&filtered.set, &setup.grids, &setup.shape)?;
    timings.insert("render".to_string(), ms_since(t));

    let t = Instant::now();
    let (rows, cols) = setup.target;
    let upsampled = scales
        .iter()
        .map(|s| upsample(&s.map, rows, cols, setup.upsample))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse(&upsampled, setup.fuse)?;
    timings.insert("fuse".to_string(), ms_since(t));

    Ok(ChainForward {
        dists,
        lifted,
        filtered,
        scales,
        fused,
        timings,
    })
}

/// `⟨weights, fused values⟩`, accumulated in f64.
pub fn chain_loss<T: Element>(fwd: &ChainForward<T>, weights: &Tensor<f64>) -> f64 {
    fwd.fused
        .values
        .data()
        .iter()
        .zip(weights.data())
        .map(|(v, w)| v.to_f64() * w)
        .sum()
}

/// Gradients of `L = ⟨d_fused, fused values⟩` with respect to every camera's
/// depth logits, opacity logits and features (plus the intermediate 3D
/// moments). Filtered-out Gaussians receive zero gradient.
pub fn backward_chain<T: Element>(
    setup: &ChainSetup,
    cams: &[CameraInputs<T>],
    fwd: &ChainForward<T>,
    d_fused: &Tensor<f64>,
) -> Result<Vec<GradBuffers<T>>> {
    check_inputs(setup, cams)?;
    if d_fused.dims() != fwd.fused.values.dims() {
        return Err(Error::Shape(format!(
            "cotangent {:?} does not match fused map {:?}",
            d_fused.dims(),
            fwd.fused.values.dims()
        )));
    }
    let set = &fwd.filtered.set;
    let ch = set.channels();
    let n = set.len();
    let scale_channels: Vec<usize> = fwd.scales.iter().map(|s| s.map.channels()).collect();
    let d_scaled = fuse_backward(d_fused, &scale_channels, setup.fuse)?;

    // Per filtered Gaussian, f64 scratch.
    let mut d_feat = vec![0.0; n * ch];
    let mut d_alpha = vec![0.0; n];
    let mut d_mu = vec![Vector3::<f64>::zeros(); n];
    let mut d_cov = vec![Matrix3::<f64>::zeros(); n];
    let features = Features::from_set(set);
    for (scale, d_up) in fwd.scales.iter().zip(&d_scaled) {
        let d_map = upsample_backward(d_up, scale.grid.n_rows, scale.grid.n_cols, setup.upsample)?;
        let g = splat_backward(&scale.gaussians, &features, &scale.grid, &d_map)?;
        for (a, b) in d_feat.iter_mut().zip(&g.d_features) {
            *a += b;
        }
        for (i, bg) in scale.gaussians.iter().enumerate() {
            let j = bg.feature_index;
            d_alpha[j] += g.d_opacity[i];
            let (dm, dc) = project_backward(&g.d_mean[i], &g.d_cov[i], &scale.grid, &setup.shape);
            d_mu[j] += dm;
            d_cov[j] += dc;
        }
    }

    // Scatter back to camera pixels.
    let mut bufs: Vec<Scratch> = setup
        .frustums
        .iter()
        .map(|fr| Scratch::new(fr.height() * fr.width(), ch))
        .collect();
    let sources = fwd.lifted.source();
    let cam_slot: BTreeMap<usize, usize> = setup
        .frustums
        .iter()
        .enumerate()
        .map(|(slot, fr)| (fr.camera_index, slot))
        .collect();
    for (j, &orig) in fwd.filtered.kept.iter().enumerate() {
        let src = sources[orig];
        let slot = cam_slot[&src.camera];
        let p = src.row * setup.frustums[slot].width() + src.col;
        let buf = &mut bufs[slot];
        buf.d_features[p * ch..(p + 1) * ch].copy_from_slice(&d_feat[j * ch..(j + 1) * ch]);
        let alpha = logistic(cams[slot].opacity_logits.data()[p].to_f64());
        buf.d_opacity_logits[p] = d_alpha[j] * alpha * (1.0 - alpha);
        buf.d_mu3d[p] = d_mu[j];
        buf.d_cov3d[p] = d_cov[j];
    }

    setup
        .frustums
        .iter()
        .zip(bufs)
        .zip(&fwd.dists)
        .map(|((fr, buf), dist)| {
            let (h, w, b) = (fr.height(), fr.width(), fr.bins());
            let hw = h * w;
            let d_logits: Vec<Vec<f64>> = (0..hw)
                .into_par_iter()
                .map(|p| {
                    let (dm, dc) = (&buf.d_mu3d[p], &buf.d_cov3d[p]);
                    if *dm == Vector3::zeros() && *dc == Matrix3::zeros() {
                        return vec![0.0; b];
                    }
                    let probs = dist.pixel_probs(p);
                    let ray = fr.ray(p / w, p % w);
                    let (mean, _) = pixel_moments(&probs, ray);
                    softmax_backward(&probs, &moments_backward(ray, &mean, dm, dc))
                })
                .collect();
            let mut depth = vec![0.0; b * hw];
            for (p, dl) in d_logits.iter().enumerate() {
                for (i, v) in dl.iter().enumerate() {
                    depth[i * hw + p] = *v;
                }
            }
            let mu: Vec<f64> = buf.d_mu3d.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            let cov: Vec<f64> = buf
                .d_cov3d
                .iter()
                .flat_map(|m| (0..9).map(move |k| m[(k / 3, k % 3)]))
                .collect();
            Ok(GradBuffers {
                d_features: Tensor::from_f64(vec![hw, ch], &buf.d_features)?,
                d_opacity_logits: Tensor::from_f64(vec![h, w], &buf.d_opacity_logits)?,
                d_depth_logits: Tensor::from_f64(vec![b, h, w], &depth)?,
                d_mu3d: Tensor::from_f64(vec![hw, 3], &mu)?,
                d_cov3d: Tensor::from_f64(vec![hw, 3, 3], &cov)?,
            })
        })
        .collect()
}

struct Scratch {
    d_features: Vec<f64>,
    d_opacity_logits: Vec<f64>,
    d_mu3d: Vec<Vector3<f64>>,
    d_cov3d: Vec<Matrix3<f64>>,
}

impl Scratch {
    fn new(pixels: usize, channels: usize) -> Self {
        Scratch {
            d_features: vec![0.0; pixels * channels],
            d_opacity_logits: vec![0.0; pixels],
            d_mu3d: vec![Vector3::zeros(); pixels],
            d_cov3d: vec![Matrix3::zeros(); pixels],
        }
    }
}
