//! Sparse block experts for continual learning.
//!
//! Weight matrices of a small frozen base network are tiled into blocks. Each task
//! picks a budget of blocks by warm-up gradient magnitude, and the picked blocks are
//! owned by experts: frozen per-task unique experts plus one plastic shared expert.
//! A linear router mixes the experts at inference without task ids.

pub mod blockgrid;
pub mod error;
pub mod experts;
pub mod gating;
pub mod metrics;
pub mod nanonet;
pub mod rng;
pub mod sos;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
