//! Rendering at several BEV resolutions, upsampling, and linear fusion.
//!
//! The fusion operators here (`sum`, `concat`) are linear stand-ins for a
//! learned decoder so that gradients flow through them unchanged.

use rayon::prelude::*;

use crate::config::{FuseMode, UpsampleMode};
use crate::error::{Error, Result};
use crate::lift::PixelGaussianSet;
use crate::raster::{
    project_set, splat_forward, BevFeatureMap, BevGaussian2D, BevGrid, Features, KernelShape,
};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct ScaleRender<T> {
    pub grid: BevGrid,
    pub gaussians: Vec<BevGaussian2D>,
    pub map: BevFeatureMap<T>,
}

/// Project and render `gs` once per grid. Grids must share their metric extent.
pub fn render_multiscale<T: Element>(
    gs: &PixelGaussianSet<T>,
    grids: &[BevGrid],
    shape: &KernelShape,
) -> Result<Vec<ScaleRender<T>>> {
    let Some(first) = grids.first() else {
        return Err(Error::InvalidArgument("no BEV grids given".into()));
    };
    if let Some(g) = grids.iter().find(|g| !g.same_extent(first)) {
        return Err(Error::InvalidArgument(format!(
            "grid extent {g:?} differs from {first:?}"
        )));
    }
    let features = Features::from_set(gs);
    grids
        .par_iter()
        .map(|grid| {
            let gaussians = project_set(gs, grid, shape)?;
            let map = splat_forward(&gaussians, &features, grid)?;
            Ok(ScaleRender {
                grid: *grid,
                gaussians,
                map,
            })
        })
        .collect()
}

/// Per-axis interpolation taps: for each output index, up to two
/// `(source index, weight)` pairs.
fn axis_taps(src: usize, dst: usize, mode: UpsampleMode) -> Vec<[(usize, f64); 2]> {
    let ratio = dst / src;
    (0..dst)
        .map(|t| match mode {
            UpsampleMode::Nearest => [(t / ratio, 1.0), (t / ratio, 0.0)],
            UpsampleMode::Bilinear => {
                // Cell-centre alignment: output centre t + 0.5 sits at source
                // coordinate (t + 0.5)/ratio, i.e. index (t + 0.5)/ratio − 0.5.
                let s = ((t as f64 + 0.5) / ratio as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let w1 = s - i0 as f64;
                [(i0, 1.0 - w1), (i1, w1)]
            }
        })
        .collect()
}

fn check_ratio(src: usize, dst: usize) -> Result<()> {
    if src == 0 || dst < src || !dst.is_multiple_of(src) {
        return Err(Error::InvalidArgument(format!(
            "target {dst} is not an integer multiple of source {src}"
        )));
    }
    Ok(())
}

fn resample_plane(
    src: &[f64],
    (sr, sc): (usize, usize),
    rows: &[[(usize, f64); 2]],
    cols: &[[(usize, f64); 2]],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for rt in rows {
        for ct in cols {
            let mut acc = 0.0;
            for &(ri, rw) in rt {
                for &(ci, cw) in ct {
                    acc += rw * cw * src[ri * sc + ci];
                }
            }
            out.push(acc);
        }
    }
    debug_assert_eq!(src.len(), sr * sc);
    out
}

fn resample_plane_transpose(
    d_out: &[f64],
    (sr, sc): (usize, usize),
    rows: &[[(usize, f64); 2]],
    cols: &[[(usize, f64); 2]],
) -> Vec<f64> {
    let mut d_src = vec![0.0; sr * sc];
    for (r, rt) in rows.iter().enumerate() {
        for (c, ct) in cols.iter().enumerate() {
            let g = d_out[r * cols.len() + c];
            for &(ri, rw) in rt {
                for &(ci, cw) in ct {
                    d_src[ri * sc + ci] += rw * cw * g;
                }
            }
        }
    }
    d_src
}

pub fn upsample<T: Element>(
    map: &BevFeatureMap<T>,
    target_rows: usize,
    target_cols: usize,
    mode: UpsampleMode,
) -> Result<BevFeatureMap<T>> {
    let (sr, sc) = (map.n_rows(), map.n_cols());
    check_ratio(sr, target_rows)?;
    check_ratio(sc, target_cols)?;
    let rows = axis_taps(sr, target_rows, mode);
    let cols = axis_taps(sc, target_cols, mode);
    let plane = |data: &[T]| -> Vec<T> {
        let src: Vec<f64> = data.iter().map(|v| v.to_f64()).collect();
        resample_plane(&src, (sr, sc), &rows, &cols)
            .into_iter()
            .map(T::from_f64)
            .collect()
    };
    let mut values = Vec::with_capacity(map.channels() * target_rows * target_cols);
    for c in 0..map.channels() {
        values.extend(plane(map.channel(c)));
    }
    Ok(BevFeatureMap {
        values: Tensor::new(vec![map.channels(), target_rows, target_cols], values)?,
        weight: Tensor::new(vec![target_rows, target_cols], plane(map.weight.data()))?,
    })
}

/// Transpose of [`upsample`] applied to a `C × target_rows × target_cols`
/// cotangent.
pub fn upsample_backward(
    d_out: &Tensor<f64>,
    src_rows: usize,
    src_cols: usize,
    mode: UpsampleMode,
) -> Result<Tensor<f64>> {
    let [ch, tr, tc] = d_out.dims() else {
        return Err(Error::Shape(format!(
            "cotangent must be C×H×W, got {:?}",
            d_out.dims()
        )));
    };
    check_ratio(src_rows, *tr)?;
    check_ratio(src_cols, *tc)?;
    let rows = axis_taps(src_rows, *tr, mode);
    let cols = axis_taps(src_cols, *tc, mode);
    let plane = tr * tc;
    let mut out = Vec::with_capacity(ch * src_rows * src_cols);
    for c in 0..*ch {
        out.extend(resample_plane_transpose(
            &d_out.data()[c * plane..(c + 1) * plane],
            (src_rows, src_cols),
            &rows,
            &cols,
        ));
    }
    Tensor::new(vec![*ch, src_rows, src_cols], out)
}

pub fn fuse<T: Element>(maps: &[BevFeatureMap<T>], mode: FuseMode) -> Result<BevFeatureMap<T>> {
    let Some(first) = maps.first() else {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    };
    let (rows, cols) = (first.n_rows(), first.n_cols());
    if let Some(m) = maps
        .iter()
        .find(|m| (m.n_rows(), m.n_cols()) != (rows, cols))
    {
        return Err(Error::Shape(format!(
            "cannot fuse {}×{} with {rows}×{cols}",
            m.n_rows(),
            m.n_cols()
        )));
    }
    let mut weight = first.weight.clone();
    for m in &maps[1..] {
        for (w, v) in weight.data_mut().iter_mut().zip(m.weight.data()) {
            *w += *v;
        }
    }
    let values = match mode {
        FuseMode::Sum => {
            if let Some(m) = maps.iter().find(|m| m.channels() != first.channels()) {
                return Err(Error::Shape(format!(
                    "sum fusion needs equal channels, got {} and {}",
                    first.channels(),
                    m.channels()
                )));
            }
            let mut acc = first.values.clone();
            for m in &maps[1..] {
                for (a, v) in acc.data_mut().iter_mut().zip(m.values.data()) {
                    *a += *v;
                }
            }
            acc
        }
        FuseMode::Concat => {
            let total: usize = maps.iter().map(|m| m.channels()).sum();
            let data = maps
                .iter()
                .flat_map(|m| m.values.data().iter().copied())
                .collect();
            Tensor::new(vec![total, rows, cols], data)?
        }
    };
    Ok(BevFeatureMap { values, weight })
}

/// Split a fused cotangent back into one cotangent per input map.
pub fn fuse_backward(
    d_fused: &Tensor<f64>,
    channels: &[usize],
    mode: FuseMode,
) -> Result<Vec<Tensor<f64>>> {
    let [ch, rows, cols] = d_fused.dims() else {
        return Err(Error::Shape(format!(
            "cotangent must be C×H×W, got {:?}",
            d_fused.dims()
        )));
    };
    match mode {
        FuseMode::Sum => {
            if channels.iter().any(|c| c != ch) {
                return Err(Error::Shape("sum fusion channel mismatch".into()));
            }
            Ok(vec![d_fused.clone(); channels.len()])
        }
        FuseMode::Concat => {
            if channels.iter().sum::<usize>() != *ch {
                return Err(Error::Shape("concat fusion channel mismatch".into()));
            }
            let plane = rows * cols;
            let mut start = 0;
            channels
                .iter()
                .map(|&c| {
                    let part = d_fused.data()[start * plane..(start + c) * plane].to_vec();
                    start += c;
                    Tensor::new(vec![c, *rows, *cols], part)
                })
                .collect()
        }
    }
}
