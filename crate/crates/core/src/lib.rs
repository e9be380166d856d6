//! Evidence-filter model for four-way multiple-choice question answering.
//!
//! Each option is encoded together with the context and question by a small
//! multi-block transformer. The pooled output of every block is mixed across
//! the four options by a 4×4 filter matrix with a residual connection and
//! layer norm, the blocks are fused by a learned linear combination, and a
//! linear head scores each option.

pub mod encoder;
pub mod error;
pub mod evidence_filter;
pub mod fusion_head;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod synth_data;

pub use error::{Error, Result};

/// Every instance has exactly this many answer options.
pub const NUM_OPTIONS: usize = 4;
