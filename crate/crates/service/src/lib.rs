//! FlowSmith service: HTTP API, filesystem workspace and CLI commands on top
//! of `flowsmith-core`.

pub mod api;
pub mod cli;
pub mod engine;
pub mod jobs;
pub mod workspace;

pub use engine::{Engine, GatewayMode, Generated};

/// Atomic file write for CLI outputs.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    flowsmith_core::gateway::write_atomic(path, bytes)
}
