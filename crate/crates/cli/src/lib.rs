//! Pipeline driver behind the `nowcast` binary.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{Ctx, ModelName, Stage};
