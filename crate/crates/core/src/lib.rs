//! Model-based calibration of disk-diffusion (DIA) breakpoints against
//! drug-dilution (MIC) breakpoints.
//!
//! The model has three layers: the assay rounding and measurement-error
//! process ([`likelihood`]), a monotone decreasing relationship between true
//! MIC and true DIA ([`curves`]), and a Dirichlet process mixture for the
//! distribution of true MICs ([`dpm`]). [`sampler`] fits the joint posterior
//! by MCMC and [`breakpoints`] turns posterior draws into a distribution over
//! DIA breakpoint pairs.

pub mod artifact;
pub mod breakpoints;
pub mod curves;
pub mod data;
pub mod dpm;
mod error;
pub mod likelihood;
pub mod normal;
pub mod sampler;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
