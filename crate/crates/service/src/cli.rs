use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flowsmith_core::flow::{deserialize, serialize, validate, Flow, NodeCatalog};
use flowsmith_core::harness::{batch, grade, GradeReport};
use flowsmith_core::executor::EvaluatorRunner;
use flowsmith_core::Parallelism;

use crate::api::{router, AppState};
use crate::engine::{resolve_config, Engine, GatewayMode};
use crate::jobs::Shared;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "flowsmith", version, about = "Generate, run and grade LLM evaluation flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// Config file (TOML). Defaults to config.toml in the cassette directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Answer model calls from recorded cassettes; no network.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Call providers and record every exchange into this cassette directory.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

impl GatewayArgs {
    fn mode(&self) -> GatewayMode {
        match (&self.replay, &self.record) {
            (Some(d), _) => GatewayMode::Replay(d.clone()),
            (_, Some(d)) => GatewayMode::Record(d.clone()),
            _ => GatewayMode::Live,
        }
    }

    fn engine(&self) -> Result<Engine> {
        let mode = self.mode();
        let cfg = resolve_config(self.config.as_deref(), &mode)?;
        Engine::open(mode, cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of built web UI assets to serve at /.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Generate a flow from a single goal statement.
    Gen {
        #[arg(long)]
        goal: String,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the plan; defaults to <out> with a .plan.json suffix.
        #[arg(long)]
        plan_out: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Execute a flow and print the result as JSON.
    Run {
        flow: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Grade one flow.
    Grade {
        flow: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Grade every *.flow.json in a directory and write a CSV report.
    GradeBatch {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a flow document against the schema and validation rules.
    Validate { flow: PathBuf },
}

fn read_flow(path: &Path) -> Result<Flow> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn plan_path(out: &Path) -> PathBuf {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("flow.json");
    let stem = name.strip_suffix(".flow.json").or_else(|| name.strip_suffix(".json")).unwrap_or(name);
    out.with_file_name(format!("{stem}.plan.json"))
}

fn print_grade(r: &GradeReport) {
    println!("{}", r.flow_id);
    let rows = [
        ("compares_two_prompts", r.compares_two_prompts, &r.details.compares_two_prompts),
        ("runs", r.runs, &r.details.runs),
        ("uses_template_chaining", r.uses_template_chaining, &r.details.uses_template_chaining),
    ];
    for (name, value, evidence) in rows {
        println!("  {name:<24} {value}");
        for e in evidence {
            println!("    {e}");
        }
    }
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Serve { workspace, addr, ui, gateway } => {
            let ws = Workspace::open(&workspace)?;
            let mode = gateway.mode();
            let cfg = resolve_config(gateway.config.as_deref(), &mode)?;
            let engine = Engine::open(mode, cfg)?;
            let settled = ws.recover(chrono::Utc::now())?;
            if settled > 0 {
                log::info!("settled {settled} unfinished documents from a previous process");
            }
            let app = router(AppState::new(Arc::new(Shared::new(ws, engine))), ui);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { goal, out, plan_out, gateway } => {
            let engine = gateway.engine()?;
            let generated = engine.generate(&goal, &|e| log::info!("{e:?}"))?;
            let flow = &generated.assembly.flow;
            crate::write_file(&out, &serialize(flow))?;
            let plan = generated.assembly.plans.last().expect("assembly holds a plan");
            let plan_file = plan_out.unwrap_or_else(|| plan_path(&out));
            crate::write_file(&plan_file, &(serde_json::to_string_pretty(plan)? + "\n").into_bytes())?;
            if generated.review_exhausted {
                eprintln!("warning: the reviewer did not accept the flow; wrote the last attempt");
            }
            eprintln!(
                "wrote {} ({} nodes, {} edges, {} model calls)",
                out.display(),
                flow.nodes().len(),
                flow.edges().len(),
                engine.gateway.stats().calls
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { flow, out, gateway } => {
            let engine = gateway.engine()?;
            let flow = read_flow(&flow)?;
            let result = engine.run(&flow, &engine.run_options())?;
            let text = serde_json::to_string_pretty(&result)? + "\n";
            match out {
                Some(p) => crate::write_file(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(match result.status {
                flowsmith_core::executor::RunStatus::Succeeded => ExitCode::SUCCESS,
                _ => ExitCode::FAILURE,
            })
        }
        Command::Grade { flow, json } => {
            let flow = read_flow(&flow)?;
            let report = grade(&flow, &NodeCatalog::standard(), &EvaluatorRunner::default());
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print_grade(&report);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GradeBatch { dir, out } => {
            if !dir.is_dir() {
                bail!("{} is not a directory", dir.display());
            }
            let report = batch(&dir, &NodeCatalog::standard(), &EvaluatorRunner::default(), Parallelism::default())?;
            crate::write_file(&out, report.to_csv().as_bytes())?;
            let (c, r, t) = report.totals();
            let n = report.reports.len();
            eprintln!("graded {n} flows: compares_two_prompts {c}/{n}, runs {r}/{n}, uses_template_chaining {t}/{n}");
            for e in &report.errors {
                eprintln!("error: {}: {}", e.file, e.message);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { flow } => {
            let flow = read_flow(&flow)?;
            let report = validate(&flow, &NodeCatalog::standard());
            if report.is_valid() {
                println!("{}: valid", flow.id());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{report}");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
