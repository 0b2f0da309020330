//! Safety-critical control of single-bus DC microgrids with constant power
//! loads.
//!
//! A feedback-linearizing controller for the bus-voltage and voltage-sharing
//! outputs provides a quadratic control Lyapunov function; reciprocal barrier
//! functions bound every converter terminal voltage. Both are combined in a
//! small quadratic program solved at every control step. A droop baseline and
//! a fixed-step simulator are included for comparison experiments.

pub mod certificates;
pub mod controllers;
pub mod equilibrium;
pub mod error;
pub mod linearization;
pub mod model;
pub mod qp;
pub mod simulation;

pub use error::{Error, Result};
