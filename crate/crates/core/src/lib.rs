//! Procedure planning over a condensed action space.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! synthetic instructional-video corpus ([`corpus`]), the sub-chain decoder
//! planner and its baselines ([`model`]), focal-loss training ([`training`])
//! and the planning metrics ([`metrics`]).

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
