//! Building blocks for depth-from-video experiments on indoor sequences:
//! depth-driven view synthesis with photometric, structural-similarity,
//! smoothness and rigid-3D-alignment losses; a direct per-pair optimizer over
//! inverse depth and camera motion; depth-map post-processing (left/right
//! fusion and rank filters); standard depth metrics; and TUM RGB-D ingestion.
//!
//! The `examples/` directory is the front door — one runnable example per
//! capability:
//!
//! ```text
//! cargo run --release --example optimize_synthetic_pair   # end-to-end depth + pose recovery
//! cargo run --release --example warp_and_losses           # warping and the loss stack
//! cargo run --release --example gradient_check            # analytic vs numerical gradients
//! cargo run --release --example icp_register              # rigid alignment of point clouds
//! cargo run --release --example postprocess_pipeline      # fusion + filtering of depth maps
//! cargo run --release --example depth_metrics             # evaluation metrics
//! cargo run --release --example tum_tools                 # dataset listing/association tools
//! ```
//!
//! The same capabilities are scriptable through the `warpdepth` binary
//! (`associate`, `eval`, `postprocess`, `optimize`, `filter-study`, `synth`).

pub mod error;
pub mod geometry;
pub mod icp;
pub mod image;
pub mod dataset;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod postprocess;
pub mod synth;
pub mod sampler;

pub use error::{Error, Result};
