//! FlowSmith core: turns a goal into an executable LLM pipeline graph.
//!
//! The pieces, bottom-up:
//!
//! - [`flow`]: the flow document, its validation and canonical encoding.
//! - [`gateway`]: every model call goes through here (live, record, replay, mock).
//! - [`intent`]: the requirements dialogue that produces an [`intent::IntentSpec`].
//! - [`planner`], [`nodegen`], [`assembler`]: plan tasks, generate nodes, wire
//!   and lay out the flow, optionally review it.
//! - [`executor`]: expands templates, queries models, runs evaluators.
//! - [`harness`]: structural grading of flows.

pub mod assembler;
pub mod clock;
pub mod config;
pub mod executor;
pub mod flow;
pub mod gateway;
pub mod harness;
pub mod intent;
pub mod nodegen;
pub mod par;
pub mod planner;
pub mod prompts;

pub use par::Parallelism;
