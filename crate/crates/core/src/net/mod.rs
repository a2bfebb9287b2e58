//! The segmentation network: an unrolled V-cycle of splitting substeps.
//!
//! Each substep is the building block
//!
//! ```text
//! ū = (1/c) Σ u*_s + γΔt (Σ Â_s * u*_s + b̂)
//! u = (I − γΔt Ŝ)^{-1} ū            (two sigmoid fixed-point sweeps)
//! ```
//!
//! with `γ = 2^{j−1} c_j` on the way down (left branch), `γ = 2^j c_j` on the
//! way up (right branch) and `γ = 1` for the closing step, whose resolvent
//! carries the Gaussian length penalty.

mod api;
mod config;
mod forward;
mod params;

use thiserror::Error;

use crate::tape::TapeError;

pub use api::{bias_eval, block_linear, block_step, forward, merged_kernel, network_block, vcycle_timestep, Bias};
pub use config::{kappa, C1Mode, NetConfig, Radii, Variant};
pub use forward::{forward_batch, Branch, Captured, ForwardOutput, ImageBatch, Mode, SubstepRecord, Trace};
pub use params::{ControlParams, Layout, ParamKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch at {branch:?} level {level} substep {substep} channel {channel}: {detail}")]
    Shape { branch: Branch, level: usize, substep: usize, channel: usize, detail: String },
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}
