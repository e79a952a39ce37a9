//! Analytic backward passes: splatting, BEV projection, 3D moments, softmax.
//!
//! Matrix cotangents use the full-matrix convention: `dL/dM[i][j]` treats
//! every entry as independent, so a symmetric matrix gets a symmetric
//! cotangent with the off-diagonal gradient stored in both slots.

mod chain;
mod check;

pub use chain::{
    backward_chain, chain_loss, forward_chain, CameraInputs, ChainForward, ChainSetup, GradBuffers,
};
pub use check::{
    grad_check, GradCheckOptions, GradCheckReport, GradScene, GradSceneSpec, GroupReport,
};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{
    check_feature_indices, BevGaussian2D, BevGrid, Features, KernelShape, TileBinning,
};
use crate::tensor::{Element, Tensor};

/// Gradients of `L = Σ_x ⟨d_out(x), F_BEV(x)⟩` per projected Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    /// Indexed by feature row (`N × C`).
    pub d_features: Vec<f64>,
    pub channels: usize,
    /// Indexed by Gaussian position in the rendered list.
    pub d_opacity: Vec<f64>,
    pub d_mean: Vec<Vector2<f64>>,
    /// Cotangent of the regularized covariance (u, v order).
    pub d_cov: Vec<Matrix2<f64>>,
}

impl SplatGrads {
    pub fn d_feature(&self, row: usize) -> &[f64] {
        &self.d_features[row * self.channels..(row + 1) * self.channels]
    }
}

// Partial layout per (tile, gaussian): opacity, mean u, mean v, dQ_uu, dQ_uv,
// dQ_vv, then one slot per channel.
const HEAD: usize = 6;

/// Backward of [`crate::raster::splat_forward`]. Truncated cells contribute
/// nothing, mirroring the forward cutoff. Tiles are processed in parallel and
/// reduced per Gaussian in tile order.
pub fn splat_backward<T: Element>(
    gaussians: &[BevGaussian2D],
    features: &Features<'_, T>,
    grid: &BevGrid,
    d_out: &Tensor<f64>,
) -> Result<SplatGrads> {
    check_feature_indices(gaussians, features)?;
    let ch = features.channels();
    if d_out.dims() != [ch, grid.n_rows, grid.n_cols] {
        return Err(Error::Shape(format!(
            "cotangent {:?} does not match {ch}×{}×{}",
            d_out.dims(),
            grid.n_rows,
            grid.n_cols
        )));
    }
    let plane = grid.cells();
    let binning = TileBinning::build(gaussians, grid);
    let stride = HEAD + ch;

    let per_tile: Vec<(Vec<u32>, Vec<f64>)> = (0..binning.n_tiles())
        .into_par_iter()
        .map(|t| {
            let tile = binning.tile_cells(t, grid);
            let mut ids = Vec::new();
            let mut partials = Vec::new();
            let mut grad_out = vec![0.0; ch];
            for &gi in binning.tile(t) {
                let g = &gaussians[gi as usize];
                let Some((r0, r1, c0, c1)) = crate::raster::clip_to_tile(g, tile, grid) else {
                    continue;
                };
                let feat: Vec<f64> = features
                    .row(g.feature_index)
                    .iter()
                    .map(|f| f.to_f64())
                    .collect();
                let mut acc = vec![0.0; stride];
                let mut touched = false;
                for r in r0..=r1 {
                    let v = r as f64 + 0.5;
                    for c in c0..=c1 {
                        let u = c as f64 + 0.5;
                        let Some((kernel, _)) = g.kernel(u, v) else {
                            continue;
                        };
                        touched = true;
                        let cell = r * grid.n_cols + c;
                        for (k, go) in grad_out.iter_mut().enumerate() {
                            *go = d_out.data()[k * plane + cell];
                        }
                        let s: f64 = grad_out.iter().zip(&feat).map(|(a, b)| a * b).sum();
                        let w = g.opacity * kernel;
                        for (k, go) in grad_out.iter().enumerate() {
                            acc[HEAD + k] += go * w;
                        }
                        acc[0] += s * kernel;
                        let dq = -0.5 * s * w;
                        let du = u - g.mean.x;
                        let dv = v - g.mean.y;
                        let qd = g.inv_cov * Vector2::new(du, dv);
                        acc[1] += -2.0 * dq * qd.x;
                        acc[2] += -2.0 * dq * qd.y;
                        acc[3] += dq * du * du;
                        acc[4] += dq * du * dv;
                        acc[5] += dq * dv * dv;
                    }
                }
                if touched {
                    ids.push(gi);
                    partials.extend_from_slice(&acc);
                }
            }
            (ids, partials)
        })
        .collect();

    let n = gaussians.len();
    let mut sums = vec![0.0; n * stride];
    for (ids, partials) in &per_tile {
        for (j, &gi) in ids.iter().enumerate() {
            let dst = &mut sums[gi as usize * stride..(gi as usize + 1) * stride];
            for (d, p) in dst.iter_mut().zip(&partials[j * stride..(j + 1) * stride]) {
                *d += p;
            }
        }
    }

    let mut d_features = vec![0.0; features.rows() * ch];
    let mut d_opacity = Vec::with_capacity(n);
    let mut d_mean = Vec::with_capacity(n);
    let mut d_cov = Vec::with_capacity(n);
    for (i, g) in gaussians.iter().enumerate() {
        let s = &sums[i * stride..(i + 1) * stride];
        d_opacity.push(s[0]);
        d_mean.push(Vector2::new(s[1], s[2]));
        let d_inv = Matrix2::new(s[3], s[4], s[4], s[5]);
        d_cov.push(-(g.inv_cov * d_inv * g.inv_cov));
        let row = g.feature_index;
        for k in 0..ch {
            d_features[row * ch + k] += s[HEAD + k];
        }
    }
    Ok(SplatGrads {
        d_features,
        channels: ch,
        d_opacity,
        d_mean,
        d_cov,
    })
}

/// Chain a BEV covariance cotangent back to the ego x/y covariance block.
///
/// With `Σ' = [[a, b], [b, c]]`, `a = Σ_yy·scale_col²`, `b = Σ_yx·scale_col·scale_row`
/// and `c = Σ_xx·scale_row²`:
/// `dL/dΣ_xx = dL/dc·scale_row²`, `dL/dΣ_xy = dL/db·scale_col·scale_row`,
/// `dL/dΣ_yy = dL/da·scale_col²`. The cotangent is symmetrized first.
pub fn bev_projection_backward(
    d_cov2d: &Matrix2<f64>,
    scale_row: f64,
    scale_col: f64,
) -> Matrix2<f64> {
    let da = d_cov2d[(0, 0)];
    let db = 0.5 * (d_cov2d[(0, 1)] + d_cov2d[(1, 0)]);
    let dc = d_cov2d[(1, 1)];
    let off = db * scale_col * scale_row;
    Matrix2::new(
        dc * scale_row * scale_row,
        off,
        off,
        da * scale_col * scale_col,
    )
}

/// Gradient of a projected Gaussian's mean and covariance with respect to
/// the 3D mean and covariance. Height does not reach the BEV plane.
pub fn project_backward(
    d_mean: &Vector2<f64>,
    d_cov: &Matrix2<f64>,
    grid: &BevGrid,
    shape: &KernelShape,
) -> (Vector3<f64>, Matrix3<f64>) {
    let d_mu3d = Vector3::new(
        d_mean.y * grid.scale_row(),
        d_mean.x * grid.scale_col(),
        0.0,
    );
    let xy = bev_projection_backward(
        &(d_cov * shape.cov_scale()),
        grid.scale_row(),
        grid.scale_col(),
    );
    let mut d_cov3d = Matrix3::zeros();
    d_cov3d.fixed_view_mut::<2, 2>(0, 0).copy_from(&xy);
    (d_mu3d, d_cov3d)
}

/// Gradient of the moments of one pixel with respect to its bin
/// probabilities. Uses `∂μ₃/∂P_j = p_j` and `∂Σ/∂P_j = (p_j − μ₃)(p_j − μ₃)ᵀ`;
/// the cross terms vanish because `Σ_i P_i (p_i − μ₃) = 0` on the simplex.
pub fn moments_backward(
    ray: &[f64],
    mean: &Vector3<f64>,
    d_mu3d: &Vector3<f64>,
    d_cov3d: &Matrix3<f64>,
) -> Vec<f64> {
    ray.chunks_exact(3)
        .map(|p| {
            let p = Vector3::new(p[0], p[1], p[2]);
            let d = p - mean;
            d_mu3d.dot(&p) + (d.transpose() * d_cov3d * d)[(0, 0)]
        })
        .collect()
}

/// Softmax Jacobian-vector product: `dℓ_j = P_j (dP_j − Σ_i P_i dP_i)`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, d)| p * (d - dot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::{pixel_moments, softmax_pixel};
    use crate::raster::{project_to_bev, splat_forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_backward_formulas_on_unit_cotangents() {
        let g = bev_projection_backward(&Matrix2::new(1.0, 0.0, 0.0, 0.0), 5.0, 2.0);
        assert_eq!(g, Matrix2::new(0.0, 0.0, 0.0, 4.0));
        // scale_x = 2 (columns), scale_y = 3 (rows).
        let g = bev_projection_backward(&Matrix2::new(0.0, 1.0, 1.0, 0.0), 3.0, 2.0);
        assert_eq!((g[(0, 1)], g[(1, 0)]), (6.0, 6.0));
        let g = bev_projection_backward(&Matrix2::new(0.0, 0.0, 0.0, 1.0), 3.0, 2.0);
        assert_eq!(g, Matrix2::new(9.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn symmetrizing_the_cotangent_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let m = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sym = (m + m.transpose()) * 0.5;
            let a = bev_projection_backward(&m, 1.7, 0.6);
            let b = bev_projection_backward(&sym, 1.7, 0.6);
            assert!((a - b).abs().max() <= 1e-7);
        }
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = BevGrid::new(-20.0, 20.0, -10.0, 10.0, 80, 50).unwrap();
        let shape = KernelShape::truncated(1.0, 0.0);
        for _ in 0..100 {
            let l = Matrix2::new(
                rng.random_range(0.5..2.0),
                0.0,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..2.0),
            );
            let cov_xy = l * l.transpose();
            let g = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let g = (g + g.transpose()) * 0.5;
            let loss = |c: &Matrix2<f64>| {
                let mut m = Matrix3::identity();
                m.fixed_view_mut::<2, 2>(0, 0).copy_from(c);
                let p = project_to_bev(&Vector3::zeros(), &m, &grid, &shape).unwrap();
                p.cov.component_mul(&g).sum()
            };
            let (_, analytic) = project_backward(&Vector2::zeros(), &g, &grid, &shape);
            let h = 1e-6;
            for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let mut plus = cov_xy;
                let mut minus = cov_xy;
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                // Off-diagonal perturbations are split symmetrically.
                let want = if i == j {
                    analytic[(i, j)]
                } else {
                    0.5 * (analytic[(0, 1)] + analytic[(1, 0)])
                };
                assert!(
                    (fd - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "{fd} vs {want}"
                );
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let grid = BevGrid::new(-4.0, 4.0, -4.0, 4.0, 16, 16).unwrap();
        let mut g = project_to_bev(
            &Vector3::new(0.3, -0.2, 0.0),
            &Matrix3::identity(),
            &grid,
            &KernelShape::truncated(2.0, 0.1),
        )
        .unwrap();
        g.opacity = 0.7;
        let f = [0.4, -1.2];
        let grads = splat_backward(
            &[g],
            &Features::new(&f, 2).unwrap(),
            &grid,
            &Tensor::zeros(&[2, 16, 16]).unwrap(),
        )
        .unwrap();
        assert!(grads.d_features.iter().all(|&v| v == 0.0));
        assert_eq!(grads.d_opacity[0], 0.0);
        assert_eq!(grads.d_mean[0], Vector2::zeros());
        assert_eq!(grads.d_cov[0], Matrix2::zeros());
    }

    #[test]
    fn centre_cell_cotangent() {
        let grid = BevGrid::new(0.0, 8.0, 0.0, 8.0, 8, 8).unwrap();
        let mut g = project_to_bev(
            &Vector3::new(3.5, 4.5, 0.0),
            &Matrix3::identity(),
            &grid,
            &KernelShape::truncated(3.0, 0.0),
        )
        .unwrap();
        g.opacity = 0.25;
        let f = [2.0];
        let mut d_out = Tensor::zeros(&[1, 8, 8]).unwrap();
        d_out.set(&[0, 3, 4], 1.0);
        let grads = splat_backward(&[g], &Features::new(&f, 1).unwrap(), &grid, &d_out).unwrap();
        assert_eq!(grads.d_features, vec![0.25]);
        assert_eq!(grads.d_opacity, vec![2.0]);
        assert_eq!(grads.d_mean[0], Vector2::zeros());
    }

    fn render_loss(gs: &[BevGaussian2D], f: &[f64], grid: &BevGrid, w: &Tensor<f64>) -> f64 {
        let map = splat_forward(gs, &Features::new(f, 2).unwrap(), grid).unwrap();
        map.values
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn splat_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = BevGrid::new(-4.0, 4.0, -4.0, 4.0, 20, 20).unwrap();
        for _ in 0..20 {
            let shape = KernelShape::truncated(2.5, 0.2);
            let gs: Vec<_> = (0..3)
                .map(|i| {
                    let l = Matrix2::new(
                        rng.random_range(0.4..1.2),
                        0.0,
                        rng.random_range(-0.5..0.5),
                        rng.random_range(0.4..1.2),
                    );
                    let mut c3 = Matrix3::identity();
                    c3.fixed_view_mut::<2, 2>(0, 0)
                        .copy_from(&(l * l.transpose()));
                    let mut g = project_to_bev(
                        &Vector3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            0.0,
                        ),
                        &c3,
                        &grid,
                        &shape,
                    )
                    .unwrap();
                    g.opacity = rng.random_range(0.1..1.0);
                    g.feature_index = i;
                    g
                })
                .collect();
            let f: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::from_f64(
                vec![2, 20, 20],
                &(0..800)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let grads = splat_backward(&gs, &Features::new(&f, 2).unwrap(), &grid, &w).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                // Opacity.
                let mut p = gs.clone();
                let mut m = gs.clone();
                p[i].opacity += h;
                m[i].opacity -= h;
                let fd =
                    (render_loss(&p, &f, &grid, &w) - render_loss(&m, &f, &grid, &w)) / (2.0 * h);
                assert!((fd - grads.d_opacity[i]).abs() <= 1e-6 * fd.abs().max(1.0));
                // Mean (cutoff crossings are unlikely at this h but possible).
                for axis in 0..2 {
                    let mut p = gs.clone();
                    let mut m = gs.clone();
                    p[i].mean[axis] += h;
                    m[i].mean[axis] -= h;
                    let fd = (render_loss(&p, &f, &grid, &w) - render_loss(&m, &f, &grid, &w))
                        / (2.0 * h);
                    assert!(
                        (fd - grads.d_mean[i][axis]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "mean {fd} vs {}",
                        grads.d_mean[i][axis]
                    );
                }
                // Covariance through its inverse.
                for (a, b) in [(0, 0), (0, 1), (1, 1)] {
                    let bump = |sign: f64| {
                        let mut gg = gs.clone();
                        let mut cov = gg[i].cov;
                        cov[(a, b)] += sign * h;
                        if a != b {
                            cov[(b, a)] += sign * h;
                        }
                        gg[i].cov = cov;
                        gg[i].inv_cov = cov.try_inverse().unwrap();
                        render_loss(&gg, &f, &grid, &w)
                    };
                    let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                    let want = if a == b {
                        grads.d_cov[i][(a, b)]
                    } else {
                        2.0 * grads.d_cov[i][(a, b)]
                    };
                    assert!(
                        (fd - want).abs() <= 1e-5 * fd.abs().max(1.0),
                        "cov {fd} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn moments_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = 6;
        let ray: Vec<f64> = (0..b)
            .flat_map(|i| [1.0 + i as f64, 0.5 * i as f64, 0.2])
            .collect();
        let logits: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_mu = Vector3::new(0.3, -0.7, 0.1);
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let d_cov = (m + m.transpose()) * 0.5;
        let loss = |l: &[f64]| {
            let (mu, cov) = pixel_moments(&softmax_pixel(l), &ray);
            d_mu.dot(&mu) + cov.component_mul(&d_cov).sum()
        };
        let probs = softmax_pixel(&logits);
        let (mu, _) = pixel_moments(&probs, &ray);
        let analytic = softmax_backward(&probs, &moments_backward(&ray, &mu, &d_mu, &d_cov));
        for j in 0..b {
            let h = 1e-5;
            let mut p = logits.clone();
            let mut q = logits.clone();
            p[j] += h;
            q[j] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-8, "{fd} vs {}", analytic[j]);
        }
        let zero = softmax_backward(
            &probs,
            &moments_backward(&ray, &mu, &Vector3::zeros(), &Matrix3::zeros()),
        );
        assert!(zero.iter().all(|&v| v == 0.0));
    }
}
