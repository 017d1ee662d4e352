//! Transfer operators, entropy criteria and best-response feedback equilibria
//! for multi-channel linear systems, with resilience checks under small
//! stochastic perturbations.

// Negated comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod entropy;
pub mod game;
pub mod io;
pub mod perturb;
pub mod system;
pub mod transfer;
