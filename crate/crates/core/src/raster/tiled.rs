use rayon::prelude::*;

use super::{check_feature_indices, BevFeatureMap, BevGaussian2D, BevGrid, Features};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Tiles are `TILE_SIZE × TILE_SIZE` cells.
pub const TILE_SIZE: usize = 16;

const BIN_CHUNK: usize = 4096;

/// Per-tile lists of Gaussian indices in ascending index order (CSR layout).
#[derive(Debug, Clone)]
pub struct TileBinning {
    pub tiles_r: usize,
    pub tiles_c: usize,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

impl TileBinning {
    pub fn build(gaussians: &[BevGaussian2D], grid: &BevGrid) -> Self {
        let tiles_r = grid.n_rows.div_ceil(TILE_SIZE);
        let tiles_c = grid.n_cols.div_ceil(TILE_SIZE);
        let n_tiles = tiles_r * tiles_c;

        // Chunks are binned in parallel and concatenated in chunk order, so the
        // stable counting sort below sees pairs in ascending Gaussian order.
        let pairs: Vec<Vec<(u32, u32)>> = gaussians
            .par_chunks(BIN_CHUNK)
            .enumerate()
            .map(|(chunk, gs)| {
                let mut local = Vec::new();
                for (j, g) in gs.iter().enumerate() {
                    let Some((r0, r1, c0, c1)) = g.cell_bounds(grid) else {
                        continue;
                    };
                    let gi = (chunk * BIN_CHUNK + j) as u32;
                    for tr in r0 / TILE_SIZE..=r1 / TILE_SIZE {
                        for tc in c0 / TILE_SIZE..=c1 / TILE_SIZE {
                            local.push(((tr * tiles_c + tc) as u32, gi));
                        }
                    }
                }
                local
            })
            .collect();

        let mut counts = vec![0usize; n_tiles + 1];
        for &(t, _) in pairs.iter().flatten() {
            counts[t as usize + 1] += 1;
        }
        for i in 0..n_tiles {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut entries = vec![0u32; counts[n_tiles]];
        for &(t, g) in pairs.iter().flatten() {
            entries[cursor[t as usize]] = g;
            cursor[t as usize] += 1;
        }
        TileBinning {
            tiles_r,
            tiles_c,
            offsets: counts,
            entries,
        }
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles_r * self.tiles_c
    }

    pub fn tile(&self, t: usize) -> &[u32] {
        &self.entries[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Total Gaussian–tile pairs.
    pub fn intersections(&self) -> usize {
        self.entries.len()
    }

    /// Inclusive cell ranges covered by tile `t`.
    pub fn tile_cells(&self, t: usize, grid: &BevGrid) -> (usize, usize, usize, usize) {
        let (tr, tc) = (t / self.tiles_c, t % self.tiles_c);
        let r0 = tr * TILE_SIZE;
        let c0 = tc * TILE_SIZE;
        (
            r0,
            (r0 + TILE_SIZE).min(grid.n_rows) - 1,
            c0,
            (c0 + TILE_SIZE).min(grid.n_cols) - 1,
        )
    }
}

/// Cells of `g` inside tile `t`, as inclusive ranges.
pub(crate) fn clip_to_tile(
    g: &BevGaussian2D,
    tile: (usize, usize, usize, usize),
    grid: &BevGrid,
) -> Option<(usize, usize, usize, usize)> {
    let (r0, r1, c0, c1) = g.cell_bounds(grid)?;
    let (tr0, tr1, tc0, tc1) = tile;
    let (r0, r1) = (r0.max(tr0), r1.min(tr1));
    let (c0, c1) = (c0.max(tc0), c1.min(tc1));
    (r0 <= r1 && c0 <= c1).then_some((r0, r1, c0, c1))
}

struct TileOutput<T> {
    values: Vec<T>,
    weight: Vec<T>,
}

/// Tiled additive splatting:
/// `F(x) = Σ_i F_i α_i exp(−½ (x − μ_i)ᵀ Σ_i⁻¹ (x − μ_i))` over Gaussians whose
/// Mahalanobis distance at `x` is within their cutoff.
///
/// Each tile is accumulated by one worker in ascending Gaussian order, so the
/// result does not depend on the thread count.
pub fn splat_forward<T: Element>(
    gaussians: &[BevGaussian2D],
    features: &Features<'_, T>,
    grid: &BevGrid,
) -> Result<BevFeatureMap<T>> {
    check_feature_indices(gaussians, features)?;
    let binning = TileBinning::build(gaussians, grid);
    Ok(render_binned(gaussians, features, grid, &binning))
}

pub(crate) fn render_binned<T: Element>(
    gaussians: &[BevGaussian2D],
    features: &Features<'_, T>,
    grid: &BevGrid,
    binning: &TileBinning,
) -> BevFeatureMap<T> {
    let ch = features.channels();
    let tiles: Vec<TileOutput<T>> = (0..binning.n_tiles())
        .into_par_iter()
        .map(|t| {
            let tile = binning.tile_cells(t, grid);
            let (tr0, tr1, tc0, tc1) = tile;
            let (th, tw) = (tr1 - tr0 + 1, tc1 - tc0 + 1);
            let mut values = vec![T::default(); ch * th * tw];
            let mut weight = vec![T::default(); th * tw];
            for &gi in binning.tile(t) {
                let g = &gaussians[gi as usize];
                let Some((r0, r1, c0, c1)) = clip_to_tile(g, tile, grid) else {
                    continue;
                };
                let feat = features.row(g.feature_index);
                for r in r0..=r1 {
                    let v = r as f64 + 0.5;
                    for c in c0..=c1 {
                        let Some((kernel, _)) = g.kernel(c as f64 + 0.5, v) else {
                            continue;
                        };
                        let w = g.opacity * kernel;
                        let local = (r - tr0) * tw + (c - tc0);
                        weight[local] += T::from_f64(w);
                        for (k, f) in feat.iter().enumerate() {
                            values[k * th * tw + local] += T::from_f64(f.to_f64() * w);
                        }
                    }
                }
            }
            TileOutput { values, weight }
        })
        .collect();

    let (rows, cols) = (grid.n_rows, grid.n_cols);
    let mut values = vec![T::default(); ch * rows * cols];
    let mut weight = vec![T::default(); rows * cols];
    for (t, out) in tiles.iter().enumerate() {
        let (tr0, tr1, tc0, tc1) = binning.tile_cells(t, grid);
        let (th, tw) = (tr1 - tr0 + 1, tc1 - tc0 + 1);
        for lr in 0..th {
            let dst = (tr0 + lr) * cols + tc0;
            weight[dst..dst + tw].copy_from_slice(&out.weight[lr * tw..(lr + 1) * tw]);
            for k in 0..ch {
                let src = k * th * tw + lr * tw;
                let dst = k * rows * cols + dst;
                values[dst..dst + tw].copy_from_slice(&out.values[src..src + tw]);
            }
        }
    }
    BevFeatureMap {
        values: Tensor::new(vec![ch, rows, cols], values).expect("shape"),
        weight: Tensor::new(vec![rows, cols], weight).expect("shape"),
    }
}
