//! Orchestration layer for the duet toolkit: plain-text configuration,
//! sequence processing, dataset synthesis, parameter sweeps, and evaluation.
//!
//! The binary in `main.rs` is a thin argument-parsing shell over this library,
//! so integration tests can drive the exact same code paths in-process.

pub mod config;
pub mod pipeline;
