//! Synthetic multi-camera scenes: boxes on a ground plane seen by a camera
//! ring, with depth, opacity and feature inputs derived from ray casting.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{make_bins, CameraModel, DepthBinning};
use crate::config::{BoxConfig, FeatureMode, RigConfig, RunConfig};
use crate::error::{Error, Result};
use crate::grad::CameraInputs;
use crate::raster::BevGrid;
use crate::tensor::Tensor;

/// Opacity logit of pixels that see a box.
pub const OBJECT_LOGIT: f64 = 4.0;
/// Opacity logit of pixels that see nothing.
pub const BACKGROUND_LOGIT: f64 = -4.0;
/// Logit gap between the hot bin and every other bin in the zero-noise case.
pub const ONEHOT_GAP: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub boxes: Vec<BoxConfig>,
    pub cameras: Vec<CameraModel>,
    pub stride: usize,
    pub depth_noise_sigma: f64,
    pub feature_mode: FeatureMode,
    pub channels: usize,
    pub seed: u64,
}

/// Five vehicles between 10 and 25 m from the ego origin.
pub fn standard_boxes() -> Vec<BoxConfig> {
    let b = |x: f64, y: f64, l: f64, w: f64, h: f64, yaw: f64| BoxConfig {
        center: [x, y, h / 2.0],
        size: [l, w, h],
        yaw,
    };
    vec![
        b(12.0, 3.0, 4.5, 1.9, 1.6, 0.2),
        b(-10.0, -6.0, 4.2, 1.8, 1.5, 1.2),
        b(6.0, -16.0, 8.0, 2.5, 3.0, 0.0),
        b(-18.0, 10.0, 4.6, 2.0, 1.7, -0.5),
        b(20.0, -8.0, 5.0, 2.1, 2.2, 0.9),
    ]
}

/// `count` cameras evenly spaced in yaw, each `ring_radius` from the origin
/// looking outwards.
pub fn build_rig(rig: &RigConfig) -> Result<Vec<CameraModel>> {
    let (h, w) = (rig.image_height, rig.image_width);
    let f = (w as f64 / 2.0) / (rig.hfov_deg.to_radians() / 2.0).tan();
    let intr = CameraModel::pinhole(f, f, w as f64 / 2.0, h as f64 / 2.0);
    (0..rig.count)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::TAU / rig.count as f64;
            let pos = Vector3::new(
                rig.ring_radius * yaw.cos(),
                rig.ring_radius * yaw.sin(),
                rig.mount_height,
            );
            let ext = CameraModel::look_extrinsics(pos, yaw, rig.pitch_deg.to_radians());
            CameraModel::new(intr, ext, (h, w))
        })
        .collect()
}

impl SceneSpec {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let channels = match cfg.scene.feature_mode {
            FeatureMode::OnehotClass => 2,
            FeatureMode::Random => cfg.scene.channels,
        };
        Ok(SceneSpec {
            boxes: cfg.scene.boxes.clone().unwrap_or_else(standard_boxes),
            cameras: build_rig(&cfg.rig)?,
            stride: cfg.rig.stride,
            depth_noise_sigma: cfg.scene.depth_noise_sigma,
            feature_mode: cfg.scene.feature_mode,
            channels,
            seed: cfg.seed,
        })
    }

    /// The same scene expressed in an ego frame rotated by `transform`
    /// (ego-old → ego-new): cameras and boxes move, the world does not.
    pub fn transformed(&self, transform: &Matrix4<f64>, yaw: f64) -> Result<Self> {
        let rot = transform.fixed_view::<3, 3>(0, 0).into_owned();
        let t = transform.fixed_view::<3, 1>(0, 3).into_owned();
        let cameras = self
            .cameras
            .iter()
            .map(|c| c.transformed(transform))
            .collect::<Result<_>>()?;
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let c = rot * Vector3::from(b.center) + t;
                BoxConfig {
                    center: [c.x, c.y, c.z],
                    size: b.size,
                    yaw: b.yaw + yaw,
                }
            })
            .collect();
        Ok(SceneSpec {
            boxes,
            cameras,
            ..self.clone()
        })
    }
}

/// Generated inputs plus ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub inputs: Vec<CameraInputs<f64>>,
    /// Planar ground-truth depth per feature pixel (`H × W`), `d_max` where
    /// the ray hits nothing.
    pub depth: Vec<Tensor<f64>>,
    /// `n_rows × n_cols`, 1 inside a box footprint.
    pub gt_mask: Tensor<f64>,
    pub warnings: Vec<String>,
}

/// Entry distance along `dir` from `origin` into an oriented box, if any.
fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &BoxConfig) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // World → box frame rotation (by −yaw about z).
    let to_box = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    let o = to_box * (origin - Vector3::from(b.center));
    let d = to_box * dir;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let half = b.size[axis] / 2.0;
        if d[axis] == 0.0 {
            if o[axis].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[axis]) / d[axis];
        let t2 = (half - o[axis]) / d[axis];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    (t_near <= t_far && t_far > 0.0).then_some(t_near.max(0.0))
}

/// Whether the ego-frame point `(x, y)` lies inside the footprint of `b`.
pub fn in_footprint(b: &BoxConfig, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0
}

/// Rasterize box footprints: a cell is set when its centre is inside a box.
pub fn footprint_mask(boxes: &[BoxConfig], grid: &BevGrid) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; grid.cells()];
    for r in 0..grid.n_rows {
        for c in 0..grid.n_cols {
            let (x, y) = grid.cell_center(r, c);
            if boxes.iter().any(|b| in_footprint(b, x, y)) {
                data[r * grid.n_cols + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![grid.n_rows, grid.n_cols], data)
}

/// Depth logits for one pixel: one-hot at the nearest bin when `sigma == 0`,
/// otherwise a discretized Gaussian centred at `depth`.
pub fn depth_logits(bins: &DepthBinning, depth: f64, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        let hot = bins.nearest(depth);
        (0..bins.len())
            .map(|i| if i == hot { 0.0 } else { -ONEHOT_GAP })
            .collect()
    } else {
        bins.values()
            .iter()
            .map(|d| -(d - depth) * (d - depth) / (2.0 * sigma * sigma))
            .collect()
    }
}

pub fn gen_scene(spec: &SceneSpec, cfg: &RunConfig) -> Result<Scene> {
    let bins = make_bins(cfg.depth.d_min, cfg.depth.d_max, cfg.depth.bins)?;
    let grid = BevGrid::from_config(&cfg.bev, cfg.bev.resolution)?;
    for (i, b) in spec.boxes.iter().enumerate() {
        if b.size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "box {i} has non-positive size {:?}",
                b.size
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = vec![false; spec.boxes.len()];
    let mut inputs = Vec::new();
    let mut depths = Vec::new();
    for cam in &spec.cameras {
        let (ih, iw) = cam.image_size();
        if spec.stride == 0 || ih % spec.stride != 0 || iw % spec.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "stride {} does not divide image size {ih}×{iw}",
                spec.stride
            )));
        }
        let (h, w) = (ih / spec.stride, iw / spec.stride);
        let hw = h * w;
        let b = bins.len();
        let centre = cam.center();
        let mut logits = vec![0.0; b * hw];
        let mut opacity = vec![BACKGROUND_LOGIT; hw];
        let mut features = vec![0.0; spec.channels * hw];
        let mut depth = vec![bins.d_max(); hw];
        for p in 0..hw {
            let u = (p % w) as f64 * spec.stride as f64 + 0.5 * spec.stride as f64;
            let v = (p / w) as f64 * spec.stride as f64 + 0.5 * spec.stride as f64;
            // Unit planar depth: the hit distance along `dir` is the depth.
            let dir = cam.unproject(u, v, 1.0) - centre;
            let hit = spec
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(i, bx)| ray_box(&centre, &dir, bx).map(|t| (t, i)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let object = match hit {
                Some((t, i)) if t <= bins.d_max() => {
                    seen[i] = true;
                    depth[p] = t;
                    opacity[p] = OBJECT_LOGIT;
                    true
                }
                _ => false,
            };
            for (i, l) in depth_logits(&bins, depth[p], spec.depth_noise_sigma)
                .into_iter()
                .enumerate()
            {
                logits[i * hw + p] = l;
            }
            match spec.feature_mode {
                FeatureMode::OnehotClass => {
                    features[p] = if object { 1.0 } else { 0.0 };
                    features[hw + p] = if object { 0.0 } else { 1.0 };
                }
                FeatureMode::Random => {
                    for ch in 0..spec.channels {
                        features[ch * hw + p] = StandardNormal.sample(&mut rng);
                    }
                }
            }
        }
        inputs.push(CameraInputs {
            depth_logits: Tensor::new(vec![b, h, w], logits)?,
            opacity_logits: Tensor::new(vec![h, w], opacity)?,
            features: Tensor::new(vec![spec.channels, h, w], features)?,
        });
        depths.push(Tensor::new(vec![h, w], depth)?);
    }
    let warnings = seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(i, _)| format!("box {i} is not visible from any camera"))
        .collect();
    Ok(Scene {
        inputs,
        depth: depths,
        gt_mask: footprint_mask(&spec.boxes, &grid)?,
        warnings,
    })
}

/// `scene.json` contents: everything needed to rebuild the scene besides
/// the tensors themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub boxes: Vec<BoxConfig>,
    pub cameras: Vec<CameraMeta>,
    pub depth_noise_sigma: f64,
    pub feature_mode: FeatureMode,
    pub channels: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraMeta {
    /// Row-major 3×3.
    pub intrinsics: [f64; 9],
    /// Row-major 4×4 ego → camera.
    pub extrinsics: [f64; 16],
    pub image_size: [usize; 2],
    pub stride: usize,
    pub depth_logits: String,
    pub opacity_logits: String,
    pub features: String,
}

impl CameraMeta {
    pub fn new(cam: &CameraModel, stride: usize, index: usize) -> Self {
        let mut intrinsics = [0.0; 9];
        let mut extrinsics = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r * 3 + c] = cam.intrinsics()[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                extrinsics[r * 4 + c] = cam.extrinsics()[(r, c)];
            }
        }
        let (h, w) = cam.image_size();
        CameraMeta {
            intrinsics,
            extrinsics,
            image_size: [h, w],
            stride,
            depth_logits: format!("cam{index}_depth_logits.bevt"),
            opacity_logits: format!("cam{index}_opacity_logits.bevt"),
            features: format!("cam{index}_features.bevt"),
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            Matrix3::from_row_slice(&self.intrinsics),
            Matrix4::from_row_slice(&self.extrinsics),
            (self.image_size[0], self.image_size[1]),
        )
    }
}
