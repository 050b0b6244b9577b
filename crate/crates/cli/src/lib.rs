//! Command-line front end for `depthcal`: file formats (PFM depth maps, PLY
//! point clouds, JSON documents) and the subcommands that tie the library
//! together.

pub mod app;
pub mod docs;
pub mod error;
pub mod pfm;
pub mod ply;

pub use app::{run, Cli};
pub use error::{CliError, CliResult};
