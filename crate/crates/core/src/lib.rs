//! Heterogeneous treatment effect (uplift) estimation toolkit.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod incremental;
pub mod learners;
pub mod pipeline;
pub mod registry;
pub mod selection;
pub mod simgen;
pub mod tlearner;
pub mod transform;
pub mod util;

pub use error::{HteError, Result};
