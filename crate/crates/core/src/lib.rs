//! Sinkhorn natural gradient (SiNG) for push-forward measures.
//!
//! The crate computes entropic-OT Sinkhorn potentials between discrete
//! measures, differentiates them through parametric push-forward maps to build
//! the empirical Sinkhorn information matrix (eSIM), and uses it to take
//! normalized natural-gradient steps. A small harness runs distribution
//! matching experiments against first-order baselines.

pub mod error;
pub mod geometry;
pub mod sinkhorn;
pub mod pushforward;
pub mod esim;
pub mod optim;
pub mod oracles;
pub mod harness;

pub use error::{Error, Result};
