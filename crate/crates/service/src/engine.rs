//! Shared generation and execution context for the server and the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use chrono::DateTime;

use flowsmith_core::assembler::{AssembleError, Assembly, Pipeline, ProgressEvent};
use flowsmith_core::clock::Clock;
use flowsmith_core::config::Config;
use flowsmith_core::executor::{run_flow, EvaluatorRunner, RunError, RunOptions, RunResult};
use flowsmith_core::flow::{Flow, NodeCatalog};
use flowsmith_core::gateway::{Backend, Cassette, Gateway};
use flowsmith_core::intent::{zero_shot, IntentError, IntentSpec};
use flowsmith_core::prompts::PromptBundle;
use flowsmith_core::Parallelism;

pub const CASSETTE_FILE: &str = "cassette.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayMode {
    Live,
    Record(PathBuf),
    Replay(PathBuf),
}

pub struct Engine {
    pub cfg: Config,
    pub gateway: Gateway,
    pub bundle: PromptBundle,
    pub catalog: NodeCatalog,
    pub evaluators: EvaluatorRunner,
    pub clock: Clock,
    pub parallelism: Parallelism,
}

/// Outcome of a generation. A flow the reviewer never accepted is still
/// returned, flagged.
#[derive(Debug, Clone)]
pub struct Generated {
    pub intent: IntentSpec,
    pub assembly: Assembly,
    pub review_exhausted: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
}

/// Config given explicitly, else `config.toml` inside the cassette
/// directory, else defaults.
pub fn resolve_config(explicit: Option<&Path>, mode: &GatewayMode) -> Result<Config> {
    let bundled = match mode {
        GatewayMode::Record(d) | GatewayMode::Replay(d) if d.is_dir() => Some(d.join(CONFIG_FILE)),
        _ => None,
    };
    match (explicit, bundled) {
        (Some(p), _) => Ok(Config::load(p)?),
        (None, Some(p)) if p.exists() => Ok(Config::load(&p)?),
        _ => Ok(Config::default()),
    }
}

impl Engine {
    pub fn new(cfg: Config, gateway: Gateway, clock: Clock) -> Result<Engine> {
        let bundle = match &cfg.prompts_dir {
            Some(dir) => PromptBundle::with_overrides(dir).with_context(|| format!("loading prompts from {}", dir.display()))?,
            None => PromptBundle::builtin(),
        };
        let evaluators = EvaluatorRunner::from_config(&cfg.execution);
        Ok(Engine {
            cfg,
            gateway,
            bundle,
            catalog: NodeCatalog::standard(),
            evaluators,
            clock,
            parallelism: Parallelism::default(),
        })
    }

    /// Replayed generations are stamped with the cassette's recording time
    /// so their documents are reproducible.
    pub fn open(mode: GatewayMode, cfg: Config) -> Result<Engine> {
        match &mode {
            GatewayMode::Live => {
                let backend: Arc<dyn Backend> = Arc::new(cfg.http_backend());
                let gateway = Gateway::live(backend, cfg.gateway_options());
                Engine::new(cfg, gateway, Clock::System)
            }
            GatewayMode::Record(dir) => {
                let file = if dir.extension().is_some_and(|x| x == "json") { dir.clone() } else { dir.join(CASSETTE_FILE) };
                let cassette = Cassette::open_for_recording(&file).with_context(|| format!("opening {}", file.display()))?;
                let backend: Arc<dyn Backend> = Arc::new(cfg.http_backend());
                let gateway = Gateway::record(backend, Arc::new(cassette), cfg.gateway_options());
                Engine::new(cfg, gateway, Clock::System)
            }
            GatewayMode::Replay(dir) => {
                let cassette = Cassette::load(dir).with_context(|| format!("loading cassettes from {}", dir.display()))?;
                let at = cassette.latest_recording().unwrap_or(DateTime::UNIX_EPOCH);
                Engine::new(cfg, Gateway::replay(Arc::new(cassette)), Clock::Fixed(at))
            }
        }
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            gateway: &self.gateway,
            bundle: &self.bundle,
            cfg: &self.cfg,
            catalog: &self.catalog,
            evaluators: &self.evaluators,
            parallelism: self.parallelism,
            clock: self.clock.clone(),
        }
    }

    pub fn assemble(&self, intent: IntentSpec, progress: &(dyn Fn(ProgressEvent) + Sync)) -> Result<Generated, GenerateError> {
        match self.pipeline().assemble(&intent, progress) {
            Ok(assembly) => Ok(Generated { intent, assembly, review_exhausted: false }),
            Err(AssembleError::ReviewExhausted(a)) => {
                log::warn!("reviewer did not accept the flow; keeping the last attempt");
                Ok(Generated { intent, assembly: *a, review_exhausted: true })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Headless generation from a single goal statement.
    pub fn generate(&self, goal: &str, progress: &(dyn Fn(ProgressEvent) + Sync)) -> Result<Generated, GenerateError> {
        let intent = zero_shot(goal, &self.gateway, &self.bundle, &self.cfg)?;
        self.assemble(intent, progress)
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { parallelism: self.parallelism, clock: self.clock.clone(), ..RunOptions::default() }
    }

    pub fn run(&self, flow: &Flow, opts: &RunOptions) -> Result<RunResult, RunError> {
        run_flow(flow, &self.catalog, &self.gateway, &self.evaluators, opts)
    }
}
