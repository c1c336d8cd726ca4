//! Lifted variational inference for relational hybrid models.

pub mod bounds;
pub mod cli;
pub mod continuous;
pub mod discrete;
pub mod error;
pub mod lve;
pub mod math;
pub mod mcmc;
pub mod mixture;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
