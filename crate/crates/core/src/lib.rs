//! Mixed-branch all-in-one image restoration.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode autodiff
//! engine; [`mdab`] and [`network`] build the restoration model on it; [`spd`] and
//! [`objectives`] provide the training losses and optimiser; [`degrade`],
//! [`metrics`], [`io`] and [`analysis`] cover data, evaluation and diagnostics; and
//! [`pipeline`] wires everything into the command workflows used by the CLI.

// NaN-rejecting `!(x > 0.0)` checks are deliberate; graph ops return `Result`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod analysis;
pub mod config;
pub mod degrade;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mdab;
pub mod network;
pub mod parallel;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod spd;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Gradients, Graph, Real, Tensor, Var};
