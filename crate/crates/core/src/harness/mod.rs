//! Synthetic scenes, end-to-end runs, evaluation, images and benchmarks.

pub mod bench;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod scene;

pub use bench::{bench, BenchReport};
pub use image::{emit_overlay, emit_pgm, parse_pnm_header, PnmHeader};
pub use pipeline::{
    best_threshold, chain_setup, class_scores, compute_iou, evaluate_scores, run_pipeline, sweep_k,
    target_grid, EvalReport, PipelineOutput, DISTANCE_BANDS,
};
pub use scene::{build_rig, footprint_mask, gen_scene, standard_boxes, Scene, SceneSpec};

use crate::error::{Error, Result};

/// Environment variable that caps worker threads.
pub const THREADS_ENV: &str = "BEVSPLAT_THREADS";

/// Thread cap from `BEVSPLAT_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

/// A rayon pool with `threads` workers (all cores when `None`).
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))
}
