//! Conditional consistency models for language-driven grasp detection.

pub mod error;
pub mod evalbench;
pub mod flow;
pub mod geometry;
pub mod network;
pub mod objectives;
pub mod schedule;
pub mod synthdata;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
