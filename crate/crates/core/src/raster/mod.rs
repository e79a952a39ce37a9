//! BEV projection of 3D Gaussians and feature splatting.
//!
//! Coordinate convention on the BEV plane: a projected Gaussian lives in
//! `(u, v) = (column, row)` cell units, the same order the BEV scaling matrix
//! `S = [[0, scale_col], [scale_row, 0]]` produces from an ego `(x, y)`:
//! ego x runs along rows, ego y along columns. Cell `(row, col)` is sampled at
//! its centre `(col + 0.5, row + 0.5)`.

mod oracle;
mod tiled;

pub use oracle::splat_oracle;
pub(crate) use tiled::clip_to_tile;
pub use tiled::{splat_forward, TileBinning, TILE_SIZE};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::config::{BevConfig, KernelMode, RunConfig};
use crate::error::{Error, Result};
use crate::lift::PixelGaussianSet;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl BevGrid {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        n_rows: usize,
        n_cols: usize,
    ) -> Result<Self> {
        if !(x_max > x_min) || !(y_max > y_min) || n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate BEV grid x[{x_min}, {x_max}] y[{y_min}, {y_max}] {n_rows}×{n_cols}"
            )));
        }
        Ok(BevGrid {
            x_min,
            x_max,
            y_min,
            y_max,
            n_rows,
            n_cols,
        })
    }

    pub fn from_config(bev: &BevConfig, resolution: usize) -> Result<Self> {
        BevGrid::new(
            bev.x_min, bev.x_max, bev.y_min, bev.y_max, resolution, resolution,
        )
    }

    /// Cells per metre along ego x (rows).
    pub fn scale_row(&self) -> f64 {
        self.n_rows as f64 / (self.x_max - self.x_min)
    }

    /// Cells per metre along ego y (columns).
    pub fn scale_col(&self) -> f64 {
        self.n_cols as f64 / (self.y_max - self.y_min)
    }

    pub fn cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Ego-frame (x, y) of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (row as f64 + 0.5) / self.scale_row(),
            self.y_min + (col as f64 + 0.5) / self.scale_col(),
        )
    }

    pub fn same_extent(&self, other: &BevGrid) -> bool {
        self.x_min == other.x_min
            && self.x_max == other.x_max
            && self.y_min == other.y_min
            && self.y_max == other.y_max
    }

    pub fn with_resolution(&self, n_rows: usize, n_cols: usize) -> Result<Self> {
        BevGrid::new(
            self.x_min, self.x_max, self.y_min, self.y_max, n_rows, n_cols,
        )
    }
}

/// How `k` and the regularizer turn a projected covariance into a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelShape {
    pub mode: KernelMode,
    pub k: f64,
    /// Added to both diagonal entries of the projected covariance (cell²).
    pub eps: f64,
}

impl KernelShape {
    pub fn truncated(k: f64, eps: f64) -> Self {
        KernelShape {
            mode: KernelMode::Truncate,
            k,
            eps,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        KernelShape {
            mode: cfg.kernel,
            k: cfg.k,
            eps: cfg.cov_eps,
        }
    }

    /// Mahalanobis radius beyond which the kernel is exactly zero.
    pub fn cutoff(&self) -> f64 {
        match self.mode {
            KernelMode::Truncate => self.k,
            KernelMode::ScaleCov => 3.0,
        }
    }

    /// Factor applied to the projected covariance before regularization.
    pub fn cov_scale(&self) -> f64 {
        match self.mode {
            KernelMode::Truncate => 1.0,
            KernelMode::ScaleCov => self.k * self.k,
        }
    }
}

/// A Gaussian on the BEV plane, `(u, v) = (col, row)` order throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGaussian2D {
    pub mean: Vector2<f64>,
    /// Regularized, symmetric covariance (cell²).
    pub cov: Matrix2<f64>,
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
    pub feature_index: usize,
    pub cull_radius: f64,
    pub cutoff: f64,
}

impl BevGaussian2D {
    pub fn row(&self) -> f64 {
        self.mean.y
    }

    pub fn col(&self) -> f64 {
        self.mean.x
    }

    /// Squared Mahalanobis distance of point `(u, v)`. Both renderers call
    /// this so truncation decisions agree bit for bit.
    #[inline]
    pub fn mahalanobis_sq(&self, u: f64, v: f64) -> f64 {
        let du = u - self.mean.x;
        let dv = v - self.mean.y;
        let q = &self.inv_cov;
        q[(0, 0)] * du * du + 2.0 * q[(0, 1)] * du * dv + q[(1, 1)] * dv * dv
    }

    /// Kernel value `exp(−q/2)` if `(u, v)` is inside the cutoff ellipse.
    #[inline]
    pub fn kernel(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let q = self.mahalanobis_sq(u, v);
        (q <= self.cutoff * self.cutoff).then(|| ((-0.5 * q).exp(), q))
    }

    /// Inclusive cell ranges `(row_lo, row_hi, col_lo, col_hi)` that can hold
    /// cell centres inside the cutoff ellipse, clipped to the grid.
    pub fn cell_bounds(&self, grid: &BevGrid) -> Option<(usize, usize, usize, usize)> {
        let half_u = self.cutoff * self.cov[(0, 0)].sqrt() + 0.5;
        let half_v = self.cutoff * self.cov[(1, 1)].sqrt() + 0.5;
        let range = |centre: f64, half: f64, n: usize| -> Option<(usize, usize)> {
            let lo = (centre - half - 0.5).floor().max(0.0);
            let hi = (centre + half - 0.5).ceil().min(n as f64 - 1.0);
            (lo <= hi && hi >= 0.0 && lo <= n as f64 - 1.0).then_some((lo as usize, hi as usize))
        };
        let (r0, r1) = range(self.mean.y, half_v, grid.n_rows)?;
        let (c0, c1) = range(self.mean.x, half_u, grid.n_cols)?;
        Some((r0, r1, c0, c1))
    }
}

/// `S·Σ_xy·Sᵀ` with `S = [[0, scale_col], [scale_row, 0]]`, evaluated with the
/// same operation order as a plain row-by-column matrix product.
pub fn bev_covariance(cov_xy: &Matrix2<f64>, scale_row: f64, scale_col: f64) -> Matrix2<f64> {
    let (sx, sy) = (scale_col, scale_row);
    Matrix2::new(
        (sx * cov_xy[(1, 1)]) * sx,
        (sx * cov_xy[(1, 0)]) * sy,
        (sy * cov_xy[(0, 1)]) * sx,
        (sy * cov_xy[(0, 0)]) * sy,
    )
}

pub fn project_to_bev(
    mu3d: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    grid: &BevGrid,
    shape: &KernelShape,
) -> Result<BevGaussian2D> {
    if !mu3d.iter().chain(cov3d.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gaussian mean/covariance".into()));
    }
    let mean = Vector2::new(
        (mu3d.y - grid.y_min) * grid.scale_col(),
        (mu3d.x - grid.x_min) * grid.scale_row(),
    );
    let cov_xy = cov3d.fixed_view::<2, 2>(0, 0).into_owned();
    let projected = bev_covariance(&cov_xy, grid.scale_row(), grid.scale_col());
    let s = shape.cov_scale();
    let a = s * projected[(0, 0)] + shape.eps;
    let c = s * projected[(1, 1)] + shape.eps;
    let b = s * 0.5 * (projected[(0, 1)] + projected[(1, 0)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "projected covariance is not positive definite (det = {det:e})"
        )));
    }
    let cov = Matrix2::new(a, b, b, c);
    let inv_cov = Matrix2::new(c / det, -b / det, -b / det, a / det);
    let half_tr = 0.5 * (a + c);
    let lambda_max = half_tr + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let cutoff = shape.cutoff();
    Ok(BevGaussian2D {
        mean,
        cov,
        inv_cov,
        opacity: 1.0,
        feature_index: 0,
        cull_radius: cutoff * lambda_max.sqrt() + 0.5,
        cutoff,
    })
}

/// Project every entry of a lifted set; `feature_index` is the entry index.
pub fn project_set<T: Element>(
    gs: &PixelGaussianSet<T>,
    grid: &BevGrid,
    shape: &KernelShape,
) -> Result<Vec<BevGaussian2D>> {
    (0..gs.len())
        .into_par_iter()
        .map(|i| {
            let mut g = project_to_bev(&gs.mu(i), &gs.cov(i), grid, shape)?;
            g.opacity = gs.opacity(i);
            g.feature_index = i;
            Ok(g)
        })
        .collect()
}

/// Row-major feature rows (`N × C`) consumed by the renderers.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a, T> {
    data: &'a [T],
    channels: usize,
}

impl<'a, T: Element> Features<'a, T> {
    pub fn new(data: &'a [T], channels: usize) -> Result<Self> {
        if channels == 0 || !data.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "{} feature values do not split into {channels} channels",
                data.len()
            )));
        }
        Ok(Features { data, channels })
    }

    pub fn from_tensor(t: &'a Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "features must be N×C, got {:?}",
                t.dims()
            )));
        }
        Features::new(t.data(), t.dims()[1])
    }

    pub fn from_set(gs: &'a PixelGaussianSet<T>) -> Self {
        Features {
            data: gs.features_data(),
            channels: gs.channels(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

pub(crate) fn check_feature_indices<T: Element>(
    gaussians: &[BevGaussian2D],
    features: &Features<'_, T>,
) -> Result<()> {
    match gaussians
        .iter()
        .find(|g| g.feature_index >= features.rows())
    {
        Some(g) => Err(Error::Shape(format!(
            "feature index {} out of range for {} rows",
            g.feature_index,
            features.rows()
        ))),
        None => Ok(()),
    }
}

/// Rendered BEV features (`C × rows × cols`) and accumulated `α·kernel` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap<T> {
    pub values: Tensor<T>,
    pub weight: Tensor<T>,
}

impl<T: Element> BevFeatureMap<T> {
    pub fn zeros(channels: usize, n_rows: usize, n_cols: usize) -> Result<Self> {
        Ok(BevFeatureMap {
            values: Tensor::zeros(&[channels, n_rows, n_cols])?,
            weight: Tensor::zeros(&[n_rows, n_cols])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn n_rows(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn n_cols(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.n_rows() * self.n_cols();
        &self.values.data()[c * hw..(c + 1) * hw]
    }

    pub fn cast<U: Element>(&self) -> BevFeatureMap<U> {
        BevFeatureMap {
            values: self.values.cast(),
            weight: self.weight.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid200() -> BevGrid {
        BevGrid::new(-50.0, 50.0, -50.0, 50.0, 200, 200).unwrap()
    }

    fn matmul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += a[i][k] * b[k][j];
                }
                out[i][j] = acc;
            }
        }
        out
    }

    #[test]
    fn diagonal_covariance_swaps_axes() {
        let cov = Matrix2::new(2.0, 0.0, 0.0, 3.0);
        let p = bev_covariance(&cov, 2.0, 2.0);
        assert_eq!(p, Matrix2::new(12.0, 0.0, 0.0, 8.0));
    }

    #[test]
    fn grid_centre_maps_to_cell_100() {
        let g = project_to_bev(
            &Vector3::new(0.0, 0.0, 7.0),
            &Matrix3::identity(),
            &grid200(),
            &KernelShape::truncated(0.5, 1e-4),
        )
        .unwrap();
        assert_eq!((g.row(), g.col()), (100.0, 100.0));
    }

    #[test]
    fn mean_uses_row_for_x_and_col_for_y() {
        let g = project_to_bev(
            &Vector3::new(10.0, -5.0, 0.0),
            &Matrix3::identity(),
            &grid200(),
            &KernelShape::truncated(0.5, 1e-4),
        )
        .unwrap();
        assert_eq!(g.row(), 120.0);
        assert_eq!(g.col(), 90.0);
    }

    #[test]
    fn projection_matches_generic_matmul_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let l = [
                [rng.random_range(-2.0..2.0), 0.0],
                [rng.random_range(-2.0..2.0), rng.random_range(0.1..2.0)],
            ];
            let lt = [[l[0][0], l[1][0]], [l[0][1], l[1][1]]];
            let cov = matmul(&l, &lt);
            let (sr, sc) = (rng.random_range(0.2..5.0), rng.random_range(0.2..5.0));
            let s = [[0.0, sc], [sr, 0.0]];
            let st = [[0.0, sr], [sc, 0.0]];
            let oracle = matmul(&matmul(&s, &cov), &st);
            let got = bev_covariance(
                &Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]),
                sr,
                sc,
            );
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(got[(i, j)], oracle[i][j]);
                }
            }
        }
    }

    #[test]
    fn regularized_inverse_and_cull_radius() {
        let cov3 = Matrix3::new(1.0, 0.3, 0.0, 0.3, 0.5, 0.0, 0.0, 0.0, 9.0);
        let g = project_to_bev(
            &Vector3::zeros(),
            &cov3,
            &grid200(),
            &KernelShape::truncated(2.0, 1e-4),
        )
        .unwrap();
        assert!((g.inv_cov * g.cov - Matrix2::identity()).abs().max() < 1e-4);
        let lmax = g.cov.symmetric_eigenvalues().max();
        assert!((g.cull_radius - (2.0 * lmax.sqrt() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rank_one_covariance_is_regularized() {
        let cov3 = Matrix3::new(4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let g = project_to_bev(
            &Vector3::zeros(),
            &cov3,
            &grid200(),
            &KernelShape::truncated(0.5, 1e-4),
        )
        .unwrap();
        assert_eq!(g.cov[(0, 0)], 1e-4);
        assert!(g.inv_cov.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_non_finite_input() {
        let r = project_to_bev(
            &Vector3::new(f64::NAN, 0.0, 0.0),
            &Matrix3::identity(),
            &grid200(),
            &KernelShape::truncated(0.5, 1e-4),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn scale_cov_mode_scales_by_k_squared() {
        let shape = KernelShape {
            mode: KernelMode::ScaleCov,
            k: 2.0,
            eps: 0.0,
        };
        let cov3 = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let g = project_to_bev(&Vector3::zeros(), &cov3, &grid200(), &shape).unwrap();
        assert_eq!(g.cov, Matrix2::new(16.0, 0.0, 0.0, 16.0));
        assert_eq!(g.cutoff, 3.0);
    }
}
