//! Depth distributions, their moments, and the lifted per-pixel Gaussians.
//!
//! Per pixel with bin probabilities `P_i` and frustum points `p_i`:
//!
//! ```text
//! μ  = Σ P_i d_i            σ² = Σ P_i (d_i − μ)²        range = [μ − kσ, μ + kσ]
//! μ₃ = Σ P_i p_i            Σ  = Σ P_i (p_i − μ₃)(p_i − μ₃)ᵀ
//! ```
//!
//! Moments are accumulated in f64 and stored at the tensor's dtype.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::{DepthBinning, Frustum};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-pixel categorical depth distribution, laid out `B × H × W`.
#[derive(Debug, Clone)]
pub struct DepthDistribution<T> {
    pub probs: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Element> DepthDistribution<T> {
    pub fn bins(&self) -> usize {
        self.probs.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.dims()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Probabilities of flat pixel `p` (row-major), widened to f64.
    pub fn pixel_probs(&self, p: usize) -> Vec<f64> {
        gather_pixel(&self.probs, p)
    }
}

fn gather_pixel<T: Element>(t: &Tensor<T>, p: usize) -> Vec<f64> {
    let hw = t.dims()[1] * t.dims()[2];
    (0..t.dims()[0])
        .map(|i| t.data()[i * hw + p].to_f64())
        .collect()
}

fn check_bhw<T: Element>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "{what} must be B×H×W, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

/// Numerically stable softmax of one pixel's logits.
pub fn softmax_pixel(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_depth<T: Element>(logits: &Tensor<T>) -> Result<DepthDistribution<T>> {
    check_bhw(logits, "depth logits")?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("depth logits".into()));
    }
    let (b, hw) = (logits.dims()[0], logits.dims()[1] * logits.dims()[2]);
    let per_pixel: Vec<Vec<f64>> = (0..hw)
        .into_par_iter()
        .map(|p| softmax_pixel(&gather_pixel(logits, p)))
        .collect();
    let mut data = vec![T::default(); b * hw];
    for (p, probs) in per_pixel.iter().enumerate() {
        for (i, &v) in probs.iter().enumerate() {
            data[i * hw + p] = T::from_f64(v);
        }
    }
    Ok(DepthDistribution {
        probs: Tensor::new(logits.dims().to_vec(), data)?,
        logits: logits.clone(),
    })
}

/// Depth-space moments. All tensors are `H × W`.
#[derive(Debug, Clone)]
pub struct DepthMoments<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub range_lo: Tensor<T>,
    pub range_hi: Tensor<T>,
}

pub fn depth_moments<T: Element>(
    dist: &DepthDistribution<T>,
    bins: &DepthBinning,
    k: f64,
) -> Result<DepthMoments<T>> {
    if dist.bins() != bins.len() {
        return Err(Error::Shape(format!(
            "distribution has {} bins, binning has {}",
            dist.bins(),
            bins.len()
        )));
    }
    let dims = vec![dist.height(), dist.width()];
    let stats: Vec<(f64, f64)> = (0..dist.pixels())
        .into_par_iter()
        .map(|p| {
            let probs = dist.pixel_probs(p);
            let mu: f64 = probs.iter().zip(bins.values()).map(|(w, d)| w * d).sum();
            let var: f64 = probs
                .iter()
                .zip(bins.values())
                .map(|(w, d)| w * (d - mu) * (d - mu))
                .sum();
            (mu, var.max(0.0).sqrt())
        })
        .collect();
    let col = |f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor<T>> {
        Tensor::new(
            dims.clone(),
            stats.iter().map(|&(m, s)| T::from_f64(f(m, s))).collect(),
        )
    };
    Ok(DepthMoments {
        mu: col(&|m, _| m)?,
        sigma: col(&|_, s| s)?,
        range_lo: col(&|m, s| m - k * s)?,
        range_hi: col(&|m, s| m + k * s)?,
    })
}

/// Mean and covariance of one pixel's categorical distribution over its ray.
/// `ray` holds `B` points as consecutive xyz triples.
pub fn pixel_moments(probs: &[f64], ray: &[f64]) -> (Vector3<f64>, Matrix3<f64>) {
    let point = |i: usize| Vector3::new(ray[3 * i], ray[3 * i + 1], ray[3 * i + 2]);
    let mean = probs
        .iter()
        .enumerate()
        .fold(Vector3::zeros(), |acc, (i, &w)| acc + point(i) * w);
    let cov = probs
        .iter()
        .enumerate()
        .fold(Matrix3::zeros(), |acc, (i, &w)| {
            let d = point(i) - mean;
            acc + d * d.transpose() * w
        });
    (mean, cov)
}

/// 3D mean (`N × 3`) and covariance (`N × 3 × 3`) for every frustum pixel.
pub fn moments_3d<T: Element>(
    dist: &DepthDistribution<T>,
    frustum: &Frustum,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if (dist.height(), dist.width(), dist.bins())
        != (frustum.height(), frustum.width(), frustum.bins())
    {
        return Err(Error::Shape(format!(
            "distribution {:?} does not match frustum {:?}",
            dist.probs.dims(),
            frustum.points.dims()
        )));
    }
    let w = dist.width();
    let n = dist.pixels();
    let per_pixel: Vec<(Vector3<f64>, Matrix3<f64>)> = (0..n)
        .into_par_iter()
        .map(|p| pixel_moments(&dist.pixel_probs(p), frustum.ray(p / w, p % w)))
        .collect();
    let mut mu = Vec::with_capacity(n * 3);
    let mut cov = Vec::with_capacity(n * 9);
    for (m, c) in &per_pixel {
        mu.extend(m.iter().map(|&v| T::from_f64(v)));
        // nalgebra is column-major; store row-major.
        for r in 0..3 {
            for cc in 0..3 {
                cov.push(T::from_f64(c[(r, cc)]));
            }
        }
    }
    Ok((
        Tensor::new(vec![n, 3], mu)?,
        Tensor::new(vec![n, 3, 3], cov)?,
    ))
}

/// Where a lifted Gaussian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GaussianSource {
    pub camera: usize,
    pub row: usize,
    pub col: usize,
}

/// The lifted Gaussian cloud: mean, covariance, opacity and feature per entry.
///
/// Stored as flat row-major buffers so that an empty set (everything
/// filtered out) is representable.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussianSet<T> {
    mu3d: Vec<T>,
    cov3d: Vec<T>,
    opacity: Vec<T>,
    features: Vec<T>,
    channels: usize,
    source: Vec<GaussianSource>,
}

impl<T: Element> PixelGaussianSet<T> {
    pub fn from_parts(
        mu3d: Vec<T>,
        cov3d: Vec<T>,
        opacity: Vec<T>,
        features: Vec<T>,
        channels: usize,
        source: Vec<GaussianSource>,
    ) -> Result<Self> {
        let n = opacity.len();
        if channels == 0 {
            return Err(Error::Shape("features need at least one channel".into()));
        }
        if mu3d.len() != 3 * n
            || cov3d.len() != 9 * n
            || features.len() != channels * n
            || source.len() != n
        {
            return Err(Error::Shape(format!(
                "inconsistent gaussian buffers for n = {n}, c = {channels}"
            )));
        }
        if opacity
            .iter()
            .any(|a| !(a.to_f64() >= 0.0 && a.to_f64() <= 1.0))
        {
            return Err(Error::InvalidArgument("opacity outside [0, 1]".into()));
        }
        Ok(PixelGaussianSet {
            mu3d,
            cov3d,
            opacity,
            features,
            channels,
            source,
        })
    }

    pub fn empty(channels: usize) -> Self {
        PixelGaussianSet {
            mu3d: vec![],
            cov3d: vec![],
            opacity: vec![],
            features: vec![],
            channels,
            source: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mu(&self, i: usize) -> Vector3<f64> {
        Vector3::from_fn(|r, _| self.mu3d[3 * i + r].to_f64())
    }

    pub fn cov(&self, i: usize) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.cov3d[9 * i + 3 * r + c].to_f64())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.opacity[i].to_f64()
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn source(&self) -> &[GaussianSource] {
        &self.source
    }

    pub fn mu3d_data(&self) -> &[T] {
        &self.mu3d
    }

    pub fn cov3d_data(&self) -> &[T] {
        &self.cov3d
    }

    pub fn opacity_data(&self) -> &[T] {
        &self.opacity
    }

    pub fn features_data(&self) -> &[T] {
        &self.features
    }

    /// `N × C` feature tensor; `None` when the set is empty.
    pub fn features_tensor(&self) -> Option<Tensor<T>> {
        (!self.is_empty()).then(|| {
            Tensor::new(vec![self.len(), self.channels], self.features.clone())
                .expect("consistent buffers")
        })
    }

    /// Tensors for mu3d, cov3d, opacity and features; `None` when empty.
    pub fn to_tensors(&self) -> Option<[Tensor<T>; 4]> {
        let n = self.len();
        (n > 0).then(|| {
            [
                Tensor::new(vec![n, 3], self.mu3d.clone()).unwrap(),
                Tensor::new(vec![n, 3, 3], self.cov3d.clone()).unwrap(),
                Tensor::new(vec![n], self.opacity.clone()).unwrap(),
                Tensor::new(vec![n, self.channels], self.features.clone()).unwrap(),
            ]
        })
    }

    pub fn concat(sets: &[PixelGaussianSet<T>]) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::InvalidArgument(
                "no gaussian sets to concatenate".into(),
            ));
        };
        let mut out = PixelGaussianSet::empty(first.channels);
        for s in sets {
            if s.channels != first.channels {
                return Err(Error::Shape(format!(
                    "channel mismatch {} vs {}",
                    s.channels, first.channels
                )));
            }
            out.mu3d.extend_from_slice(&s.mu3d);
            out.cov3d.extend_from_slice(&s.cov3d);
            out.opacity.extend_from_slice(&s.opacity);
            out.features.extend_from_slice(&s.features);
            out.source.extend_from_slice(&s.source);
        }
        Ok(out)
    }

    /// Entries at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let c = self.channels;
        let mut out = PixelGaussianSet::empty(c);
        for &i in indices {
            out.mu3d.extend_from_slice(&self.mu3d[3 * i..3 * i + 3]);
            out.cov3d.extend_from_slice(&self.cov3d[9 * i..9 * i + 9]);
            out.opacity.push(self.opacity[i]);
            out.features
                .extend_from_slice(&self.features[c * i..c * (i + 1)]);
            out.source.push(self.source[i]);
        }
        out
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Combine moments with opacity logits (`H × W`) and features (`C × H × W`)
/// into row-major ordered Gaussians.
pub fn assemble_gaussians<T: Element>(
    mu3d: &Tensor<T>,
    cov3d: &Tensor<T>,
    opacity_logits: &Tensor<T>,
    features: &Tensor<T>,
    camera_index: usize,
) -> Result<PixelGaussianSet<T>> {
    if opacity_logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "opacity logits must be H×W, got {:?}",
            opacity_logits.dims()
        )));
    }
    let (h, w) = (opacity_logits.dims()[0], opacity_logits.dims()[1]);
    let n = h * w;
    if features.rank() != 3 || features.dims()[1..] != [h, w] {
        return Err(Error::Shape(format!(
            "features must be C×{h}×{w}, got {:?}",
            features.dims()
        )));
    }
    if mu3d.dims() != [n, 3] || cov3d.dims() != [n, 3, 3] {
        return Err(Error::Shape(format!(
            "moments {:?} / {:?} do not match {n} pixels",
            mu3d.dims(),
            cov3d.dims()
        )));
    }
    let c = features.dims()[0];
    let mut feats = Vec::with_capacity(n * c);
    for p in 0..n {
        feats.extend((0..c).map(|ch| features.data()[ch * n + p]));
    }
    let opacity = opacity_logits
        .data()
        .iter()
        .map(|&l| T::from_f64(logistic(l.to_f64())))
        .collect();
    let source = (0..n)
        .map(|p| GaussianSource {
            camera: camera_index,
            row: p / w,
            col: p % w,
        })
        .collect();
    PixelGaussianSet::from_parts(
        mu3d.data().to_vec(),
        cov3d.data().to_vec(),
        opacity,
        feats,
        c,
        source,
    )
}

#[derive(Debug, Clone)]
pub struct Filtered<T> {
    pub set: PixelGaussianSet<T>,
    /// Indices into the unfiltered set, ascending.
    pub kept: Vec<usize>,
    pub retained_fraction: f64,
}

/// Keep entries with `opacity ≥ threshold`, preserving order.
pub fn filter_opacity<T: Element>(gs: &PixelGaussianSet<T>, threshold: f64) -> Result<Filtered<T>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "opacity threshold {threshold} outside [0, 1]"
        )));
    }
    let kept: Vec<usize> = (0..gs.len())
        .filter(|&i| gs.opacity(i) >= threshold)
        .collect();
    let retained_fraction = if gs.is_empty() {
        1.0
    } else {
        kept.len() as f64 / gs.len() as f64
    };
    Ok(Filtered {
        set: gs.select(&kept),
        kept,
        retained_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{build_frustum, make_bins, CameraModel};
    use nalgebra::{Matrix4, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist_from_probs(b: usize, probs: &[f64]) -> DepthDistribution<f64> {
        let t = Tensor::new(vec![b, 1, probs.len() / b], probs.to_vec()).unwrap();
        DepthDistribution {
            probs: t.clone(),
            logits: t,
        }
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let logits = Tensor::<f64>::new(vec![4, 1, 1], vec![3.0; 4]).unwrap();
        let d = softmax_depth(&logits).unwrap();
        assert!(d.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn peaked_logits_match_direct_evaluation() {
        let logits = Tensor::<f64>::new(vec![4, 1, 1], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let d = softmax_depth(&logits).unwrap();
        let denom = 10f64.exp() + 3.0;
        assert!((d.probs.data()[0] - 10f64.exp() / denom).abs() < 1e-12);
        assert!((d.probs.data()[1] - 1.0 / denom).abs() < 1e-12);
        assert!((d.probs.data()[0] - 0.99986).abs() < 1e-5);
        assert!((d.probs.data()[3] - 4.5e-5).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..8 * 6).map(|_| rng.random_range(-20.0..20.0)).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.0).collect();
        let a = softmax_depth(&Tensor::new(vec![8, 2, 3], vals).unwrap()).unwrap();
        let b = softmax_depth(&Tensor::new(vec![8, 2, 3], shifted).unwrap()).unwrap();
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-7);
        for p in 0..6 {
            let s: f64 = a.pixel_probs(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::<f32>::new(vec![2, 1, 1], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_depth(&t), Err(Error::NonFinite(_))));
        let t = Tensor::<f32>::new(vec![2, 1, 1], vec![f32::INFINITY, 0.0]).unwrap();
        assert!(softmax_depth(&t).is_err());
    }

    #[test]
    fn two_point_depth_moments() {
        let bins = make_bins(2.0, 6.0, 2).unwrap(); // {2, 4}
        let d = dist_from_probs(2, &[0.5, 0.5]);
        let m = depth_moments(&d, &bins, 0.5).unwrap();
        assert_eq!(m.mu.data(), &[3.0]);
        assert_eq!(m.sigma.data(), &[1.0]);
        assert_eq!(m.range_lo.data(), &[2.5]);
        assert_eq!(m.range_hi.data(), &[3.5]);
    }

    #[test]
    fn delta_depth_moments() {
        let bins = make_bins(1.0, 61.0, 64).unwrap();
        let i = bins.nearest(10.0);
        let mut p = vec![0.0; 64];
        p[i] = 1.0;
        let m = depth_moments(&dist_from_probs(64, &p), &bins, 0.5).unwrap();
        assert_eq!(m.mu.data()[0], bins.values()[i]);
        assert_eq!(m.sigma.data()[0], 0.0);
        assert_eq!(m.range_lo.data()[0], m.range_hi.data()[0]);
    }

    fn neumaier_sum(it: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for x in it {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn depth_moments_match_compensated_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bins = make_bins(1.0, 61.0, 64).unwrap();
        for _ in 0..50 {
            let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
            let d = softmax_depth(&Tensor::new(vec![64, 1, 1], logits).unwrap()).unwrap();
            let m = depth_moments(&d, &bins, 1.0).unwrap();
            let p = d.pixel_probs(0);
            let mu = neumaier_sum(p.iter().zip(bins.values()).map(|(w, x)| w * x));
            let var = neumaier_sum(
                p.iter()
                    .zip(bins.values())
                    .map(|(w, x)| w * (x - mu).powi(2)),
            );
            assert!((m.mu.data()[0] - mu).abs() <= 1e-5 * mu.abs());
            assert!((m.sigma.data()[0] - var.sqrt()).abs() <= 1e-5 * var.sqrt());
            let lo = m.range_lo.data()[0];
            assert!(lo >= 1.0 - 60.0 && lo <= m.range_hi.data()[0]);
        }
    }

    fn axis_camera_frustum(bins: &DepthBinning) -> Frustum {
        // Single pixel at the principal point of an identity-like camera.
        let k = CameraModel::pinhole(1.0, 1.0, 0.5, 0.5);
        let cam = CameraModel::new(k, Matrix4::identity(), (1, 1)).unwrap();
        build_frustum(&cam, bins, 1, 0).unwrap()
    }

    #[test]
    fn two_point_moments_on_optical_axis() {
        let bins = make_bins(2.0, 6.0, 2).unwrap();
        let f = axis_camera_frustum(&bins);
        let (mu, cov) = moments_3d(&dist_from_probs(2, &[0.5, 0.5]), &f).unwrap();
        assert_eq!(mu.data(), &[0.0, 0.0, 3.0]);
        assert_eq!(cov.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn delta_moments_are_the_frustum_point() {
        let bins = make_bins(1.0, 61.0, 8).unwrap();
        let f = axis_camera_frustum(&bins);
        let mut p = vec![0.0; 8];
        p[5] = 1.0;
        let (mu, cov) = moments_3d(&dist_from_probs(8, &p), &f).unwrap();
        let pt = f.point(0, 0, 5);
        assert_eq!(mu.data(), pt.as_slice());
        assert!(cov.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moments_shape_mismatch() {
        let bins = make_bins(1.0, 61.0, 8).unwrap();
        let f = axis_camera_frustum(&bins);
        assert!(moments_3d(&dist_from_probs(4, &[0.25; 4]), &f).is_err());
    }

    #[test]
    fn covariance_is_rank_one_psd_and_mean_on_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins = make_bins(1.0, 61.0, 64).unwrap();
        let k = CameraModel::pinhole(300.0, 300.0, 240.0, 112.0);
        let e = CameraModel::look_extrinsics(Vector3::new(1.0, 0.5, 1.6), 0.7, -0.1);
        let cam = CameraModel::new(k, e, (224, 480)).unwrap();
        let f = build_frustum(&cam, &bins, 8, 0).unwrap();
        for _ in 0..100 {
            let (r, c) = (rng.random_range(0..28), rng.random_range(0..60));
            let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let probs = softmax_pixel(&logits);
            let (mu, cov) = pixel_moments(&probs, f.ray(r, c));
            assert!((cov - cov.transpose()).abs().max() <= 1e-6);
            let eig = SymmetricEigen::new(cov).eigenvalues;
            let mut ev: Vec<f64> = eig.iter().copied().collect();
            ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(ev[2] >= -1e-6);
            assert!(ev[1].abs() <= 1e-6 * ev[0] && ev[2].abs() <= 1e-6 * ev[0]);

            let first = f.point(r, c, 0);
            let last = f.point(r, c, 63);
            let seg = last - first;
            let t = (mu - first).dot(&seg) / seg.norm_squared();
            assert!((0.0..=1.0).contains(&t));
            assert!((first + seg * t - mu).norm() <= 1e-5);

            let centred = (0..64).fold(Vector3::zeros(), |acc, i| {
                acc + (f.point(r, c, i) - mu) * probs[i]
            });
            assert!(centred.norm() <= 1e-6);

            // trace(Σ) = σ²_depth · |ray step per metre of depth|².
            let dir = (last - first) / (bins.values()[63] - bins.values()[0]);
            let dmu: f64 = probs.iter().zip(bins.values()).map(|(w, d)| w * d).sum();
            let dvar: f64 = probs
                .iter()
                .zip(bins.values())
                .map(|(w, d)| w * (d - dmu).powi(2))
                .sum();
            assert!((cov.trace() - dvar * dir.norm_squared()).abs() <= 1e-6 * cov.trace());
        }
    }

    #[test]
    fn assemble_applies_logistic_and_transposes_features() {
        let n = 2 * 3;
        let mu = Tensor::<f32>::zeros(&[n, 3]).unwrap();
        let cov = Tensor::<f32>::zeros(&[n, 3, 3]).unwrap();
        let op = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let feats = Tensor::<f32>::from_f64(
            vec![2, 2, 3],
            &(0..12).map(|v| v as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let gs = assemble_gaussians(&mu, &cov, &op, &feats, 4).unwrap();
        assert_eq!(gs.len(), 6);
        assert!(gs.opacity_data().iter().all(|&a| a == 0.5));
        assert_eq!(gs.feature(4), &[4.0, 10.0]);
        assert_eq!(
            gs.source()[4],
            GaussianSource {
                camera: 4,
                row: 1,
                col: 1
            }
        );

        let no_channels = Tensor::<f32>::zeros(&[1, 2, 3]).unwrap();
        assert!(assemble_gaussians(&mu, &cov, &op, &no_channels, 0).is_ok());
        assert!(
            PixelGaussianSet::<f32>::from_parts(vec![], vec![], vec![], vec![], 0, vec![]).is_err()
        );
        let wrong = Tensor::<f32>::zeros(&[1, 3, 2]).unwrap();
        assert!(assemble_gaussians(&mu, &cov, &op, &wrong, 0).is_err());
    }

    #[test]
    fn stride_8_gives_1680_gaussians_per_camera() {
        let bins = make_bins(1.0, 61.0, 64).unwrap();
        let k = CameraModel::pinhole(340.0, 340.0, 240.0, 112.0);
        let cam = CameraModel::new(k, Matrix4::identity(), (224, 480)).unwrap();
        let f = build_frustum(&cam, &bins, 8, 0).unwrap();
        let logits = Tensor::<f32>::zeros(&[64, 28, 60]).unwrap();
        let d = softmax_depth(&logits).unwrap();
        let (mu, cov) = moments_3d(&d, &f).unwrap();
        let gs = assemble_gaussians(
            &mu,
            &cov,
            &Tensor::zeros(&[28, 60]).unwrap(),
            &Tensor::zeros(&[3, 28, 60]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(gs.len(), 1680);
    }

    #[test]
    fn filter_keeps_entries_at_or_above_threshold() {
        let gs = PixelGaussianSet::<f64>::from_parts(
            vec![0.0; 9],
            vec![0.0; 27],
            vec![0.5, 0.005, 0.02],
            vec![1.0, 2.0, 3.0],
            1,
            (0..3)
                .map(|c| GaussianSource {
                    camera: 0,
                    row: 0,
                    col: c,
                })
                .collect(),
        )
        .unwrap();
        let f = filter_opacity(&gs, 0.01).unwrap();
        assert_eq!(f.kept, vec![0, 2]);
        assert!((f.retained_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.set.features_data(), &[1.0, 3.0]);
        let all = filter_opacity(&gs, 0.0).unwrap();
        assert_eq!(all.set, gs);
        assert!(filter_opacity(&gs, 1.01).is_err());
        assert!(filter_opacity(&gs, -0.1).is_err());
    }
}
