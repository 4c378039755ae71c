//! Safe simultaneous learning and control of discrete-time LTI systems.
//!
//! A ridge-regression estimator learns `[A B]` from streaming transitions,
//! a confidence ellipsoid bounds its error, and a safety filter projects
//! nominal inputs onto constraints tightened by that uncertainty and by the
//! process noise, so that each next state satisfies `H x ≤ h` with
//! probability at least `1 − δ`.

pub mod commands;
pub mod confidence;
pub mod config;
pub mod error;
pub mod estimator;
pub mod filter;
pub mod qp;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
