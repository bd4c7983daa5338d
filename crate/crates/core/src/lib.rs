//! Bin-picking 6D pose estimation toolkit.
//!
//! Synthesizes cluttered depth scenes, trains a multi-task network
//! (detection, center offset, binned depth and Euler angle classification),
//! generates pose hypotheses, rescores them with a relational network and
//! evaluates the result with symmetry-aware average precision.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod jointreg;
pub mod numerics;
pub mod pipeline;
pub mod posehyp;
pub mod render;
pub mod scenegen;

pub use error::{Error, Result};
