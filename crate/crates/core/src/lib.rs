//! Discrete-time engine for time-inconsistent stochastic control problems
//! whose value is a utility of the initial value of a controlled BSDE.
//!
//! * [`lattice`] — binomial scenario trees and conditional expectations.
//! * [`bsde`] — explicit backward scheme, policy enumeration, reachable sets.
//! * [`duality`] — the dual target problem: HJB grid solver, direct tree
//!   evaluation, nodal sets and their geometric checks.
//! * [`dynutil`] — dynamic utilities restoring time consistency, including
//!   the Riccati-switching construction for linear drivers.
//! * [`master`] — the forward value function, its dynamic programming check
//!   and a finite-difference residual for its master equation.
//! * [`benchmarks`] — worked problems with closed-form answers.

pub mod benchmarks;
pub mod bsde;
pub mod duality;
pub mod dynutil;
pub mod error;
pub mod lattice;
pub mod master;

pub use error::{Error, Result};
