//! Multiplex target-behavior relation network for click-through-rate
//! prediction: graph construction, relational path extraction, a small
//! reverse-mode differentiation kernel, the network itself, training,
//! metrics, and a synthetic world generator.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graphs;
pub mod model;
pub mod pathfinder;
pub mod synth;
pub mod tensor;
pub mod train;
