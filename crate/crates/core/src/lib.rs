//! Quadratic backward stochastic differential equations: problem
//! specification, structural checks, and three numerical routes to the
//! initial value (regression Monte Carlo, exponential transform, and a
//! finite-difference solver for the associated parabolic equation).

pub mod bsde;
pub mod config;
pub mod expr;
pub mod harness;
pub mod kappa;
pub mod problem;
pub mod sde;
pub mod stats;
pub mod control;
pub mod pde;
