//! Radio map construction from environment rasters with a conditional
//! decoupled latent diffusion model.

// Config checks write `!(x > 0.0)` on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod domain;
pub mod heatmap;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sim;
pub mod training;
pub mod vae;
