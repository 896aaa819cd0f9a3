//! Parallel-beam CT reconstruction with learned local fusion.
//!
//! The crate simulates low-dose CT scans of synthetic phantoms, reconstructs
//! them with filtered back-projection (FBP) or penalized weighted least
//! squares (PWLS), and boosts either reconstructor by fusing several
//! parameter-swept image versions through a small feed-forward network
//! trained on reference images.
//!
//! The `examples/` directory holds one runnable walkthrough per capability;
//! the `tomofuse` binary exposes the same pipelines as subcommands.

pub mod error;
pub mod fbp;
pub mod fusion;
pub mod image;
pub mod io;
pub mod lbfgs;
pub mod metrics;
pub mod nn;
pub mod pwc;
pub mod pwls;
pub mod rng;
pub mod scan;

pub use error::{Result, TomoError};
pub use image::Image;

/// Configure the global thread pool once, before any parallel work.
///
/// `None` reads `TOMOFUSE_THREADS` and falls back to the core count. All
/// parallel kernels in the crate produce bitwise-identical results for any
/// thread count, so this only affects speed.
pub fn configure_threads(threads: Option<usize>) {
    let n = threads.or_else(|| {
        std::env::var("TOMOFUSE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
