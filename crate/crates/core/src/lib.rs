//! Temporal normalizing flows for densities of stochastic dynamical systems.
//!
//! The crate learns a family of time-indexed densities `p(x, t)` from
//! snapshots of SDE sample paths with a stack of time-conditioned affine
//! coupling layers, and provides the reference machinery used to judge the
//! result:
//!
//! | Module      | Contents                                                         |
//! |-------------|------------------------------------------------------------------|
//! | [`noise`]   | reproducible RNG streams, Brownian and symmetric α-stable draws  |
//! | [`sde`]     | built-in SDE systems, Euler–Maruyama paths, snapshot datasets    |
//! | [`flow`]    | MLPs, coupling layers, the flow model and its checkpoints        |
//! | [`train`]   | NLL, exact reverse-mode gradients, Adam, the training loop       |
//! | [`fpe`]     | explicit finite-difference local and nonlocal Fokker–Planck      |
//! | [`km`]      | Kramers–Moyal drift/diffusion estimation from transition pairs   |
//! | [`eval`]    | density grids from flows and samples, comparisons, mode counts   |
//!
//! The flow and training code is generic over the floating point type
//! ([`Scalar`]); the aliases at the crate root pin the `f64` instantiation
//! used by the solvers and the CLI.

pub mod error;
pub mod eval;
pub mod flow;
pub mod fpe;
pub mod grid;
pub mod km;
pub mod noise;
pub mod scalar;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
pub use grid::{DensityGrid, GridSpec};
pub use scalar::Scalar;

/// Double precision flow model, the default everywhere outside of tests.
pub type FlowModel = flow::FlowModel<f64>;
/// Single precision flow model.
pub type FlowModelF32 = flow::FlowModel<f32>;
/// Double precision scale/translation network.
pub type Mlp = flow::Mlp<f64>;
/// Single precision scale/translation network.
pub type MlpF32 = flow::Mlp<f32>;
/// Double precision coupling layer.
pub type CouplingLayer = flow::CouplingLayer<f64>;
/// Gradient congruent to a double precision [`FlowModel`].
pub type FlowGradient = train::FlowGradient<f64>;
/// Adam state for a double precision [`FlowModel`].
pub type OptimizerState = train::OptimizerState<f64>;
