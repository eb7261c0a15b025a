//! Laboratory for dual-task training with stochastic task switching.
//!
//! The crate bundles:
//! - [`tensor`]: dense tensors, tape-based reverse-mode differentiation and
//!   seeded random streams;
//! - [`theory`]: exact quadratic models of two interacting tasks, with the
//!   closed-form oracles used to check the simulators;
//! - [`data`]: synthetic subject-pair and video corpora plus the reference
//!   frame and token-drop regularizers;
//! - [`model`]: a miniature diffusion transformer with low-rank adapters and
//!   v-prediction losses;
//! - [`train`]: task switching, AdamW with warmup and cosine restarts, and
//!   PCGrad (plain and buffered);
//! - [`telemetry`]: gradient flattening, pre-sync aggregation, cosine/norm
//!   measurement, the step-cost model and the motion categorizer;
//! - [`experiment`]: config parsing, experiment runners and run comparison.

pub mod data;
pub mod experiment;
pub mod model;
pub mod telemetry;
pub mod tensor;
pub mod theory;
pub mod train;

pub use tensor::{Tensor, TensorError};
