//! Command-line pipeline for the text-dependent speaker verification
//! toolkit: run configuration, the array container used for checkpoints
//! and embedding archives, and one function per subcommand.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{ArrayEntry, ArrayRole, Checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use config::{Paths, RunConfig, TrialConfig};
