//! Depth bins, pinhole cameras and frustum construction.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames are
//! x right, y down, z along the optical axis. Extrinsics map ego-frame points
//! into the camera frame (ego → camera), so lifting applies their inverse.
//! Depth is planar depth along the optical axis, not range along the ray.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform depth hypotheses `d_i = d_min + i·(d_max − d_min)/B`, `i ∈ [0, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBinning {
    d_min: f64,
    d_max: f64,
    values: Vec<f64>,
}

pub fn make_bins(d_min: f64, d_max: f64, bins: usize) -> Result<DepthBinning> {
    if !(d_min > 0.0) || !d_min.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "d_min must be > 0, got {d_min}"
        )));
    }
    if !(d_max > d_min) || !d_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "d_max must exceed d_min, got [{d_min}, {d_max}]"
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let step = (d_max - d_min) / bins as f64;
    let values = (0..bins).map(|i| d_min + i as f64 * step).collect();
    Ok(DepthBinning {
        d_min,
        d_max,
        values,
    })
}

impl DepthBinning {
    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> f64 {
        (self.d_max - self.d_min) / self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the bin value closest to `depth`.
    pub fn nearest(&self, depth: f64) -> usize {
        let i = ((depth - self.d_min) / self.step()).round();
        i.clamp(0.0, (self.values.len() - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    /// (height, width) in pixels.
    image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(2, 2)] != 1.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidArgument(
                "intrinsics must be upper triangular with I[2,2] = 1".into(),
            ));
        }
        if k[(0, 0)] * k[(1, 1)] == 0.0 || !k.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "intrinsics must be invertible".into(),
            ));
        }
        let r = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "extrinsic rotation is not a proper rotation (|RᵀR − I| = {ortho:e})"
            )));
        }
        let last = extrinsics.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidArgument(
                "extrinsics last row must be [0, 0, 0, 1]".into(),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidArgument("image size must be non-zero".into()));
        }
        Ok(CameraModel {
            intrinsics,
            extrinsics,
            image_size,
        })
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// Ego → camera transform for a camera at `position` looking along
    /// heading `yaw` (radians, counter-clockwise from ego x) tilted by `pitch`
    /// (radians, positive up).
    pub fn look_extrinsics(position: Vector3<f64>, yaw: f64, pitch: f64) -> Matrix4<f64> {
        let forward = Vector3::new(
            pitch.cos() * yaw.cos(),
            pitch.cos() * yaw.sin(),
            pitch.sin(),
        );
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * position);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        e
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// `E⁻¹ · (d · I⁻¹ · [u, v, 1]ᵀ)` for planar depth `d`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        // Upper-triangular I inverted by back substitution.
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        let cam = Vector3::new(x, y, 1.0) * depth;
        self.rotation().transpose() * (cam - self.translation())
    }

    /// Ego point → (u, v, planar depth). Depth is negative behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.rotation() * point + self.translation();
        let pix = self.intrinsics * cam;
        (pix.x / pix.z, pix.y / pix.z, cam.z)
    }

    /// Rigidly move the camera: if `t` maps old ego coordinates to new ones,
    /// the returned camera sees the transformed world the same way.
    pub fn transformed(&self, t: &Matrix4<f64>) -> Result<Self> {
        let r = t.fixed_view::<3, 3>(0, 0).into_owned();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::InvalidArgument("transform is not rigid".into()));
        }
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
        let back = -(r.transpose() * t.fixed_view::<3, 1>(0, 3));
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&back);
        let mut e = self.extrinsics * inv;
        e.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        CameraModel::new(self.intrinsics, e, self.image_size)
    }
}

/// Lattice of lifted points, `points[r][c][i]` is pixel (r, c) at depth bin i.
#[derive(Debug, Clone)]
pub struct Frustum {
    pub points: Tensor<f64>,
    pub camera_index: usize,
    pub stride: usize,
}

impl Frustum {
    pub fn height(&self) -> usize {
        self.points.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.points.dims()[1]
    }

    pub fn bins(&self) -> usize {
        self.points.dims()[2]
    }

    /// The `B × 3` block of points along the ray of feature pixel (row, col).
    pub fn ray(&self, row: usize, col: usize) -> &[f64] {
        let b = self.bins();
        let start = (row * self.width() + col) * b * 3;
        &self.points.data()[start..start + b * 3]
    }

    pub fn point(&self, row: usize, col: usize, bin: usize) -> Vector3<f64> {
        let r = self.ray(row, col);
        Vector3::new(r[bin * 3], r[bin * 3 + 1], r[bin * 3 + 2])
    }
}

/// Sample the strided pixel grid at cell centres, `u = (j + 0.5)·stride`.
pub fn build_frustum(
    cam: &CameraModel,
    bins: &DepthBinning,
    stride: usize,
    camera_index: usize,
) -> Result<Frustum> {
    let (h, w) = cam.image_size();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} does not divide image size {h}×{w}"
        )));
    }
    let (fh, fw, b) = (h / stride, w / stride, bins.len());
    let mut data = Vec::with_capacity(fh * fw * b * 3);
    for row in 0..fh {
        let v = (row as f64 + 0.5) * stride as f64;
        for col in 0..fw {
            let u = (col as f64 + 0.5) * stride as f64;
            for &d in bins.values() {
                let p = cam.unproject(u, v, d);
                data.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
    }
    Ok(Frustum {
        points: Tensor::new(vec![fh, fw, b, 3], data)?,
        camera_index,
        stride,
    })
}
