//! Command-line orchestration: run manifests, pipeline stages and the
//! `quicktext` subcommands.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod stamp;

pub use commands::{run, Cli};
pub use error::{CliError, ExitKind};
pub use manifest::RunManifest;
