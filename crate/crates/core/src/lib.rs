//! Optimal-transport regularization of neuron representations.
//!
//! The crate is split by concern:
//!
//! * [`ot`]: discrete Kantorovich solvers (exact network simplex, log-domain
//!   Sinkhorn, IPOT) and plan diagnostics.
//! * [`representation`]: neuron-activation cost matrices and the
//!   representation regularizers with their fixed-plan gradients.
//! * [`nn`]: a small dense network with manual backpropagation and SGD.
//! * [`distill`]: temperature-softened softmax and the distillation objective.
//! * [`harness`]: synthetic tasks and the fine-tuning / compression regimes.
//! * [`analysis`]: trace-of-plan diagnostics over depth and training time.

pub mod analysis;
pub mod distill;
pub mod harness;
pub mod nn;
pub mod ot;
pub mod representation;

pub use ot::{
    solve, solve_exact, solve_ipot, solve_sinkhorn, transport_cost, CostMatrix, DiscreteMeasure,
    Method, OtError, SolveReport, SolverSettings, TransportPlan,
};
