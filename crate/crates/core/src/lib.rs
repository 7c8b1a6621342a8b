//! Posterior-guided post-training quantization.
//!
//! The crate fits Gaussian posteriors over weight blocks, designs quantizers
//! that minimize posterior-expected distortion in whitened coordinates,
//! allocates mixed precision under an exact storage budget, and exports
//! bit-packed models.
//!
//! Pipeline stages map onto modules:
//!
//! - [`model_store`]: weight blocks and the on-disk model container
//! - [`gauss`]: standard-normal integrals used by every analytic loss
//! - [`posterior`]: diagonal Laplace, K-FAC and low-rank+diagonal posteriors, whiteners
//! - [`codebook`]: uniform mid-rise and Lloyd codebooks, quantization, affine export
//! - [`losstable`]: per-block, per-bit expected-loss tables and marginal gains
//! - [`allocator`]: greedy per-bit knapsack allocation and the DP oracle
//! - [`packer`]: storage accounting and the packed export format
//! - [`proxy_distill`]: toy networks, GGN oracles, teacher and scale distillation
//! - [`metrics`]: evaluation metrics
//! - [`pipeline`]: configuration and the end-to-end staged pipeline

pub mod allocator;
pub mod codebook;
pub mod error;
pub mod gauss;
pub mod losstable;
pub mod metrics;
pub mod model_store;
pub mod packer;
pub mod pipeline;
pub mod posterior;
pub mod proxy_distill;
pub mod rng;
pub mod tsv;

pub use allocator::{Allocation, AllocationProblem};
pub use codebook::{Codebook, CompiledAffine, LloydCodebook, UniformCodebook};
pub use error::{Error, Result};
pub use losstable::{Designer, LossTable, MarginalGains};
pub use model_store::{BlockKind, ModelManifest, WeightBlock};
pub use packer::{CostLedger, CostModel, PackedModel};
pub use pipeline::{run_pipeline, PipelineConfig, Report};
pub use posterior::{BlockPosterior, Covariance, CurvatureOracle, Whitener};
pub use proxy_distill::ToyNet;
