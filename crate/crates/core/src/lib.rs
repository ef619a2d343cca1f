//! Homotopy-based safe trajectory planning in a Frenet frame.

pub mod corridor;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod mpc;
pub mod ocp;
pub mod projection;
pub mod sim;
pub mod splines;

pub use error::{PlanError, Result};
