//! Water-hammer simulation and fatigue-constrained model predictive control
//! for medium-head hydropower plants.
//!
//! The crate is organised around the closed-loop experiment: a nonlinear
//! equivalent-circuit penstock model ([`hydraulics`]) driven by a droop
//! governor and synchronous generator ([`electromech`]), an MPC layer that
//! relinearizes the circuit ([`linearize`]) and solves a small dense QP
//! ([`mpc`]) to keep penstock heads inside a fatigue-derived band, the
//! benchmark filters ([`benchmarks`]), and fatigue accounting by rainflow
//! counting and Miner's rule ([`fatigue`]). [`harness`] orchestrates runs and
//! [`io`] handles configuration, traces, results and the CLI.

pub mod benchmarks;
pub mod electromech;
pub mod error;
pub mod fatigue;
pub mod harness;
pub mod hydraulics;
pub mod io;
pub mod linearize;
pub mod mpc;
pub mod ode;

pub use error::{Error, Result};
