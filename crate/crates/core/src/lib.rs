//! Simulation and calibration of data-access profiles in a data grid.
//!
//! The crate has three layers:
//!
//! * a tick-synchronous simulator ([`grid`], [`workload`], [`transfer`],
//!   [`engine`]) that replays data-access campaigns over virtual links with
//!   fair-share bandwidth and stochastic background load;
//! * an observation pipeline ([`analysis`]) that logs one row per completed
//!   transfer and fits the origin-constrained linear model
//!   `T = a*S + b*ConTh + c*ConPr`;
//! * a likelihood-free calibration stack ([`calibration`], [`closure`]) that
//!   learns a classifier between simulated parameter settings and uses it as
//!   a Metropolis-Hastings acceptance ratio to infer the protocol overhead
//!   and background-load parameters from observed coefficients.

pub mod analysis;
pub mod calibration;
pub mod closure;
pub mod config;
pub mod engine;
pub mod grid;
pub mod transfer;
pub mod workload;
