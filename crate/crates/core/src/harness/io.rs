//! On-disk layout of scenes, lifted Gaussians and rendered maps.
//!
//! Every tensor is a BEVT file stored as f32; metadata lives in JSON next to
//! the tensors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{CameraMeta, Scene, SceneMeta, SceneSpec};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::grad::CameraInputs;
use crate::lift::PixelGaussianSet;
use crate::tensor::{read_tensor, write_tensor, Element, Tensor};

pub const SCENE_JSON: &str = "scene.json";
pub const GT_MASK: &str = "gt_mask.bevt";
pub const GAUSSIANS_JSON: &str = "gaussians.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_as<T: Element>(path: PathBuf) -> Result<Tensor<T>> {
    Ok(read_tensor(path)?.to_typed())
}

pub fn write_scene(dir: &Path, spec: &SceneSpec, scene: &Scene) -> Result<SceneMeta> {
    create_dir(dir)?;
    let cameras: Vec<CameraMeta> = spec
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| CameraMeta::new(c, spec.stride, i))
        .collect();
    for (meta, cam) in cameras.iter().zip(&scene.inputs) {
        write_tensor(
            &cam.depth_logits.cast::<f32>(),
            dir.join(&meta.depth_logits),
        )?;
        write_tensor(
            &cam.opacity_logits.cast::<f32>(),
            dir.join(&meta.opacity_logits),
        )?;
        write_tensor(&cam.features.cast::<f32>(), dir.join(&meta.features))?;
    }
    write_tensor(&scene.gt_mask.cast::<f32>(), dir.join(GT_MASK))?;
    let meta = SceneMeta {
        boxes: spec.boxes.clone(),
        cameras,
        depth_noise_sigma: spec.depth_noise_sigma,
        feature_mode: spec.feature_mode,
        channels: spec.channels,
        seed: spec.seed,
        warnings: scene.warnings.clone(),
    };
    write_json(&meta, &dir.join(SCENE_JSON))?;
    Ok(meta)
}

/// A scene directory loaded back: cameras, stride and per-camera inputs.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub meta: SceneMeta,
    pub cameras: Vec<CameraModel>,
    pub stride: usize,
    pub inputs: Vec<CameraInputs<f32>>,
    pub gt_mask: Tensor<f32>,
}

pub fn read_scene(dir: &Path) -> Result<LoadedScene> {
    let meta: SceneMeta = read_json(&dir.join(SCENE_JSON))?;
    let cameras = meta
        .cameras
        .iter()
        .map(|c| c.camera())
        .collect::<Result<Vec<_>>>()?;
    let stride = meta.cameras.first().map_or(1, |c| c.stride);
    if meta.cameras.iter().any(|c| c.stride != stride) {
        return Err(Error::InvalidArgument(
            "cameras disagree on feature stride".into(),
        ));
    }
    let inputs = meta
        .cameras
        .iter()
        .map(|c| {
            Ok(CameraInputs {
                depth_logits: read_as(dir.join(&c.depth_logits))?,
                opacity_logits: read_as(dir.join(&c.opacity_logits))?,
                features: read_as(dir.join(&c.features))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoadedScene {
        gt_mask: read_as(dir.join(GT_MASK))?,
        meta,
        cameras,
        stride,
        inputs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussiansMeta {
    pub count: usize,
    pub channels: usize,
    pub unfiltered: usize,
    pub retained_fraction: f64,
    pub opacity_threshold: f64,
}

const GAUSSIAN_FILES: [&str; 4] = ["mu3d.bevt", "cov3d.bevt", "opacity.bevt", "features.bevt"];

pub fn write_gaussians<T: Element>(
    dir: &Path,
    set: &PixelGaussianSet<T>,
    meta: &GaussiansMeta,
) -> Result<()> {
    create_dir(dir)?;
    write_json(meta, &dir.join(GAUSSIANS_JSON))?;
    let (n, c) = (set.len(), set.channels());
    if n == 0 {
        // Tensors cannot have a zero extent; the metadata alone says "empty".
        return Ok(());
    }
    let to32 = |v: &[T]| v.iter().map(|x| x.to_f64() as f32).collect::<Vec<_>>();
    write_tensor(
        &Tensor::new(vec![n, 3], to32(set.mu3d_data()))?,
        dir.join(GAUSSIAN_FILES[0]),
    )?;
    write_tensor(
        &Tensor::new(vec![n, 3, 3], to32(set.cov3d_data()))?,
        dir.join(GAUSSIAN_FILES[1]),
    )?;
    write_tensor(
        &Tensor::new(vec![n], to32(set.opacity_data()))?,
        dir.join(GAUSSIAN_FILES[2]),
    )?;
    write_tensor(
        &Tensor::new(vec![n, c], to32(set.features_data()))?,
        dir.join(GAUSSIAN_FILES[3]),
    )
}

/// Read a Gaussian directory. Sources are not stored; they read back as
/// camera 0, pixel (i, 0).
pub fn read_gaussians(dir: &Path) -> Result<PixelGaussianSet<f32>> {
    let meta: GaussiansMeta = read_json(&dir.join(GAUSSIANS_JSON))?;
    if meta.count == 0 {
        return Ok(PixelGaussianSet::empty(meta.channels.max(1)));
    }
    let mu = read_as::<f32>(dir.join(GAUSSIAN_FILES[0]))?;
    let cov = read_as::<f32>(dir.join(GAUSSIAN_FILES[1]))?;
    let opacity = read_as::<f32>(dir.join(GAUSSIAN_FILES[2]))?;
    let features = read_as::<f32>(dir.join(GAUSSIAN_FILES[3]))?;
    let n = opacity.len();
    if features.rank() != 2 {
        return Err(Error::Shape(format!(
            "features must be N×C, got {:?}",
            features.dims()
        )));
    }
    let c = features.dims()[1];
    let source = (0..n)
        .map(|i| crate::lift::GaussianSource {
            camera: 0,
            row: i,
            col: 0,
        })
        .collect();
    PixelGaussianSet::from_parts(
        mu.into_data(),
        cov.into_data(),
        opacity.into_data(),
        features.into_data(),
        c,
        source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::harness::scene::gen_scene;

    #[test]
    fn scene_round_trips_through_a_directory() {
        let mut cfg = RunConfig::default();
        cfg.rig.image_height = 32;
        cfg.rig.image_width = 64;
        let spec = SceneSpec::from_config(&cfg).unwrap();
        let scene = gen_scene(&spec, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &spec, &scene).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.cameras.len(), 6);
        assert_eq!(back.stride, 8);
        assert_eq!(
            back.inputs[2].depth_logits.cast::<f64>(),
            scene.inputs[2].depth_logits.cast::<f32>().cast::<f64>()
        );
        assert_eq!(back.gt_mask.cast::<f64>(), scene.gt_mask);
        for (a, b) in back.cameras.iter().zip(&spec.cameras) {
            assert_eq!(a.extrinsics(), b.extrinsics());
        }
    }

    #[test]
    fn empty_gaussian_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = PixelGaussianSet::<f32>::empty(2);
        let meta = GaussiansMeta {
            count: 0,
            channels: 2,
            unfiltered: 10,
            retained_fraction: 0.0,
            opacity_threshold: 0.01,
        };
        write_gaussians(dir.path(), &set, &meta).unwrap();
        let back = read_gaussians(dir.path()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.channels(), 2);
    }
}
