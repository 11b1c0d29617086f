//! Pathology-preserving 3D outpainting with a conditioned wavelet diffusion
//! model.
//!
//! The pipeline: volumes are decomposed into 8 Haar wavelet subbands, a
//! conditional denoiser is trained in the wavelet domain against masked-region
//! conditioning, full volumes are sampled with the DDPM reverse process while
//! preserving the conditioned region, and sample diversity/quality is
//! quantified with masked MS-SSIM, pairwise cosine similarity, and histogram
//! KL divergence.
//!
//! See the `examples/` directory for runnable entry points to each capability,
//! and the `powdr` binary for the batch CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod maskgen;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod volume;
pub mod wavelet;

pub use error::{PowdrError, Result};
