#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod compute;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod par;

pub use error::{Error, Result};
pub mod netgraph;
pub mod oracle;
pub mod pipeline;
pub mod pruner;
pub mod scoring;
pub mod trainer;
