use rayon::prelude::*;

use super::{check_feature_indices, BevFeatureMap, BevGaussian2D, BevGrid, Features};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Reference renderer: every cell against every Gaussian, f64 accumulation,
/// no culling other than the per-Gaussian Mahalanobis cutoff.
pub fn splat_oracle<T: Element>(
    gaussians: &[BevGaussian2D],
    features: &Features<'_, T>,
    grid: &BevGrid,
) -> Result<BevFeatureMap<f64>> {
    check_feature_indices(gaussians, features)?;
    let (rows, cols, ch) = (grid.n_rows, grid.n_cols, features.channels());
    let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let v = r as f64 + 0.5;
            let mut values = vec![0.0; ch * cols];
            let mut weight = vec![0.0; cols];
            for c in 0..cols {
                let u = c as f64 + 0.5;
                for g in gaussians {
                    let Some((kernel, _)) = g.kernel(u, v) else {
                        continue;
                    };
                    let w = g.opacity * kernel;
                    weight[c] += w;
                    for (k, f) in features.row(g.feature_index).iter().enumerate() {
                        values[k * cols + c] += f.to_f64() * w;
                    }
                }
            }
            (values, weight)
        })
        .collect();

    let mut values = vec![0.0; ch * rows * cols];
    let mut weight = vec![0.0; rows * cols];
    for (r, (vals, w)) in per_row.iter().enumerate() {
        weight[r * cols..(r + 1) * cols].copy_from_slice(w);
        for k in 0..ch {
            let dst = k * rows * cols + r * cols;
            values[dst..dst + cols].copy_from_slice(&vals[k * cols..(k + 1) * cols]);
        }
    }
    Ok(BevFeatureMap {
        values: Tensor::new(vec![ch, rows, cols], values)?,
        weight: Tensor::new(vec![rows, cols], weight)?,
    })
}
