//! Sparse voxel tensors, height-axis reduction operators (pooling, static
//! full-height convolution and the spatial-aware SDR family), and a dual-branch
//! voxel/BEV backbone with multi-level spatial residual fusion. Every
//! differentiable operator has an exact hand-written backward pass.

pub mod backbone;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod ingest;
pub mod oracle;
pub mod reduce;
pub mod sparseconv;
pub mod trainlite;
pub mod voxgrid;

pub use error::{Error, Result};
pub use voxgrid::{Coord, DenseBevMap, GridGeometry, SparseVoxelTensor};

/// Environment variable capping internal parallelism (`0` or unset: rayon default).
pub const THREADS_ENV: &str = "MDRNET_THREADS";

/// Configures the global rayon pool from [`THREADS_ENV`]. Returns the thread
/// count applied, if any. Safe to call more than once; later calls are no-ops.
pub fn configure_threads_from_env() -> Option<usize> {
    let n = std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .ok()
        .map(|_| n)
}
