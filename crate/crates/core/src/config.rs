//! JSON run configuration. Every field is optional; missing fields fall back
//! to the primary setting (depth 1..61 m in 64 bins, k = 0.5, three BEV
//! scales at 50/100/200 cells over ±50 m).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    #[default]
    Sum,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

/// How the tolerance coefficient `k` shapes a splat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Kernel cut off where the Mahalanobis distance exceeds `k`.
    #[default]
    Truncate,
    /// Covariance scaled by `k²`, kernel cut off at Mahalanobis distance 3.
    ScaleCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Channel 0 is the object class, channel 1 background.
    #[default]
    OnehotClass,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            d_min: 1.0,
            d_max: 61.0,
            bins: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Target (finest) resolution in cells per side.
    pub resolution: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -50.0,
            y_max: 50.0,
            resolution: 200,
        }
    }
}

/// Surround camera ring used by the synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub count: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Feature stride relative to the image.
    pub stride: usize,
    pub hfov_deg: f64,
    /// Camera height above the ground plane (m).
    pub mount_height: f64,
    /// Negative values tilt the cameras down.
    pub pitch_deg: f64,
    /// Horizontal distance of each camera from the ego origin (m).
    pub ring_radius: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            count: 6,
            image_height: 224,
            image_width: 480,
            stride: 8,
            hfov_deg: 70.0,
            mount_height: 6.0,
            pitch_deg: -25.0,
            ring_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub depth_noise_sigma: f64,
    pub feature_mode: FeatureMode,
    /// Channel count for `random` features; `onehot_class` always uses 2.
    pub channels: usize,
    /// Explicit boxes; `None` selects the standard five-box scene.
    pub boxes: Option<Vec<BoxConfig>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            depth_noise_sigma: 0.0,
            feature_mode: FeatureMode::OnehotClass,
            channels: 8,
            boxes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub depth: DepthConfig,
    pub k: f64,
    pub bev: BevConfig,
    pub scales: Vec<usize>,
    pub opacity_threshold: f64,
    pub fuse_mode: FuseMode,
    pub seed: u64,
    pub kernel: KernelMode,
    /// Isotropic regularization added to every projected BEV covariance (cell²).
    pub cov_eps: f64,
    pub upsample: UpsampleMode,
    pub rig: RigConfig,
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            depth: DepthConfig::default(),
            k: 0.5,
            bev: BevConfig::default(),
            scales: vec![50, 100, 200],
            opacity_threshold: 0.01,
            fuse_mode: FuseMode::Sum,
            seed: 0,
            kernel: KernelMode::Truncate,
            cov_eps: DEFAULT_COV_EPS,
            upsample: UpsampleMode::Bilinear,
            rig: RigConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

pub const DEFAULT_COV_EPS: f64 = 1.0;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.depth;
        if !(d.d_min > 0.0) {
            return Err(Error::config("depth.d_min", "d_min > 0 required"));
        }
        if !(d.d_max > d.d_min) {
            return Err(Error::config("depth.d_max", "d_max > d_min required"));
        }
        if d.bins < 2 {
            return Err(Error::config("depth.bins", "bins ≥ 2 required"));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::config("k", "k > 0 required"));
        }
        let b = &self.bev;
        if !(b.x_max > b.x_min) {
            return Err(Error::config("bev.x_max", "x_max > x_min required"));
        }
        if !(b.y_max > b.y_min) {
            return Err(Error::config("bev.y_max", "y_max > y_min required"));
        }
        if b.resolution == 0 {
            return Err(Error::config("bev.resolution", "resolution ≥ 1 required"));
        }
        if self.scales.is_empty() {
            return Err(Error::config("scales", "at least one scale required"));
        }
        for &s in &self.scales {
            if s == 0 || !b.resolution.is_multiple_of(s) {
                return Err(Error::config(
                    "scales",
                    format!("scale {s} must divide resolution {}", b.resolution),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.opacity_threshold) {
            return Err(Error::config(
                "opacity_threshold",
                "opacity_threshold must lie in [0, 1]",
            ));
        }
        if !(self.cov_eps > 0.0) || !self.cov_eps.is_finite() {
            return Err(Error::config("cov_eps", "cov_eps > 0 required"));
        }
        let r = &self.rig;
        if r.count == 0 {
            return Err(Error::config("rig.count", "at least one camera required"));
        }
        if r.stride == 0
            || !r.image_height.is_multiple_of(r.stride)
            || !r.image_width.is_multiple_of(r.stride)
        {
            return Err(Error::config(
                "rig.stride",
                "stride must divide image_height and image_width",
            ));
        }
        if !(r.hfov_deg > 0.0 && r.hfov_deg < 180.0) {
            return Err(Error::config(
                "rig.hfov_deg",
                "hfov_deg must lie in (0, 180)",
            ));
        }
        if !(self.scene.depth_noise_sigma >= 0.0) {
            return Err(Error::config(
                "scene.depth_noise_sigma",
                "depth_noise_sigma ≥ 0 required",
            ));
        }
        if self.scene.channels == 0 {
            return Err(Error::config("scene.channels", "channels ≥ 1 required"));
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
