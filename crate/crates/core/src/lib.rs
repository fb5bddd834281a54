//! Density control of interacting agent systems.
//!
//! The grid solver discretizes the controlled McKean–Vlasov problem into a
//! multi-marginal optimal transport over the time chain `x₀, x₁, …, x_T` and
//! solves it by proximal steps, each an entropic transport problem handled by
//! Sinkhorn belief propagation. A closed-form linear-quadratic solver, policy
//! recovery and a particle simulator complete the toolkit.

pub mod chain;
pub mod cost;
pub mod error;
pub mod grid;
pub mod logspace;
pub mod lq;
pub mod multispecies;
pub mod par;
pub mod particle;
pub mod policy;
pub mod proximal;
pub mod sbp;

pub use chain::{entropy, ChainModel, MarginalSet};
pub use error::{Error, Result};
pub use grid::{
    conv_grad_w, DriftField, GradTable, Grid, GridField, InteractionPotential, ProbVector,
    StateCost,
};
pub use cost::DynamicsSpec;
pub use lq::{solve_lq, GaussianEndpoints, LqSolution, LqSpec};
pub use multispecies::{solve_multi, MultiSpec};
pub use particle::{simulate_grid, simulate_lq, SimConfig, Simulation};
pub use policy::{recover_policy, recover_policy_multi, PolicyField};
pub use proximal::{solve_density_control, ProximalConfig, SolveReport, Status};
