//! Core of a desk-scale laboratory for multi-language sparse-expert code
//! language models.
//!
//! Everything here is pure computation over `alloc` collections: the
//! reverse-mode tensor engine, the decoder-only transformer with dense,
//! Switch and per-language expert feed-forward slots, corpus normalization
//! and BPE, the optimizer and schedules, and the evaluation metrics. File
//! formats, the CLI and experiment orchestration live in the `plmoe` crate.
#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
