//! Few-shot prompting engine for a small decoder-only transformer.
//!
//! Demonstrations can be concatenated into one prompt (the conventional
//! baseline) or split into groups that are encoded independently with
//! right-aligned positions. The test input then attends every cached group
//! through rescaled attention, where its own keys carry a weight multiplier
//! equal to the number of groups.

pub mod attention;
pub mod context;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
