//! Zero-shot fine-grained classification by label propagation over a
//! semantic directed class graph, with a small hierarchical feature learner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hiernet;
pub mod io;
pub mod pipeline;
pub mod propagation;
pub mod seeder;
pub mod semantic;
pub mod synth;

pub use error::{Error, Result};
