//! Flow execution: template expansion, model calls, evaluators and
//! aggregation.

mod aggregate;
mod expand;
pub mod expr;
mod runner;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{aggregate, AggregateRow, MetricTypeMismatch};
pub use expand::{expand, Binding, ExpandError, PromptInstance, MAX_DEPTH};
pub use runner::{EvalError, EvalInput, EvaluatorRunner};

use crate::clock::Clock;
use crate::flow::{
    escape, topological_order, unescape, validate, Flow, Node, NodeCatalog, NodeKind, NodePayload, ScoreSchema,
    ValidationReport, RESPONSE_PLACEHOLDER,
};
use crate::gateway::{ChatRequest, Gateway, Message, Schema, Usage};
use crate::Parallelism;

/// Language id of the built-in evaluator language.
pub const BUILTIN_LANGUAGE: &str = "expr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub instance: PromptInstance,
    pub sample_index: u32,
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResponseRef {
    pub node: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreValue {
    Bool(bool),
    Number(f64),
    Label(String),
}

impl From<expr::Outcome> for ScoreValue {
    fn from(o: expr::Outcome) -> Self {
        match o {
            expr::Outcome::Bool(b) => ScoreValue::Bool(b),
            expr::Outcome::Number(n) => ScoreValue::Number(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub response: ResponseRef,
    pub evaluator: String,
    pub value: ScoreValue,
    /// Model label of the scored response.
    pub model: String,
    /// Every variable binding behind the scored response.
    pub vars: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOutput {
    Fields { values: Vec<String> },
    Responses { instances: Vec<PromptInstance>, responses: Vec<ResponseRecord> },
    Scores { scores: Vec<EvalScore> },
    Aggregates { rows: Vec<AggregateRow> },
}

impl NodeOutput {
    pub fn responses(&self) -> &[ResponseRecord] {
        match self {
            NodeOutput::Responses { responses, .. } => responses,
            _ => &[],
        }
    }

    pub fn scores(&self) -> &[EvalScore] {
        match self {
            NodeOutput::Scores { scores } => scores,
            _ => &[],
        }
    }

    pub fn rows(&self) -> &[AggregateRow] {
        match self {
            NodeOutput::Aggregates { rows } => rows,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed { node: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub flow_id: String,
    pub nodes: BTreeMap<String, NodeOutput>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub status: RunStatus,
}

impl RunResult {
    /// The result with timestamps cleared, for comparing runs.
    pub fn without_timestamps(&self) -> RunResult {
        RunResult { started_at: DateTime::UNIX_EPOCH, finished_at: None, ..self.clone() }
    }

    pub fn response_count(&self) -> usize {
        self.nodes.values().map(|o| o.responses().len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("flow is not runnable:\n{0}")]
    InvalidFlow(ValidationReport),
}

/// Node-level failure, recorded in [`RunStatus::Failed`].
#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Evaluator(#[from] EvalError),
    #[error(transparent)]
    Metric(#[from] MetricTypeMismatch),
    #[error("model call failed: {0}")]
    Model(String),
}

pub type Snapshot = Arc<dyn Fn(&RunResult) + Send + Sync>;

#[derive(Clone, Default)]
pub struct RunOptions {
    pub parallelism: Parallelism,
    /// Syntax-check evaluators instead of running them; evaluator and Vis
    /// nodes then produce empty outputs.
    pub check_only: bool,
    pub clock: Clock,
    /// Called with the partial result after each node completes.
    pub on_snapshot: Option<Snapshot>,
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("parallelism", &self.parallelism)
            .field("check_only", &self.check_only)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

/// Runs every node in topological order. Node failures end the run and are
/// recorded in the result; outputs of nodes that completed are kept.
pub fn run_flow(
    flow: &Flow,
    catalog: &NodeCatalog,
    gateway: &Gateway,
    evaluators: &EvaluatorRunner,
    opts: &RunOptions,
) -> Result<RunResult, RunError> {
    let report = validate(flow, catalog);
    if !report.is_valid() {
        return Err(RunError::InvalidFlow(report));
    }
    let order = topological_order(flow).expect("validated flows are acyclic");
    let mut result = RunResult {
        flow_id: flow.id().to_owned(),
        nodes: BTreeMap::new(),
        started_at: opts.clock.now(),
        finished_at: None,
        status: RunStatus::Running,
    };

    for id in order {
        let node = flow.node(&id).expect("ordered ids exist");
        match run_node(flow, node, &result.nodes, gateway, evaluators, opts) {
            Ok(output) => {
                result.nodes.insert(id, output);
            }
            Err(e) => {
                log::warn!("node {id} failed: {e}");
                result.status = RunStatus::Failed { node: id, error: e.to_string() };
                break;
            }
        }
        if let Some(cb) = &opts.on_snapshot {
            cb(&result);
        }
    }
    if result.status == RunStatus::Running {
        result.status = RunStatus::Succeeded;
    }
    result.finished_at = Some(opts.clock.now());
    if let Some(cb) = &opts.on_snapshot {
        cb(&result);
    }
    Ok(result)
}

fn upstream_responses<'a>(
    flow: &Flow,
    node: &Node,
    done: &'a BTreeMap<String, NodeOutput>,
) -> Vec<(ResponseRef, &'a ResponseRecord)> {
    let mut sources: Vec<&str> = flow.incoming(&node.id).map(|e| e.from_node.as_str()).collect();
    sources.dedup();
    let mut out = Vec::new();
    for src in sources {
        if let Some(o) = done.get(src) {
            for (index, r) in o.responses().iter().enumerate() {
                out.push((ResponseRef { node: src.to_owned(), index }, r));
            }
        }
    }
    out
}

fn run_node(
    flow: &Flow,
    node: &Node,
    done: &BTreeMap<String, NodeOutput>,
    gateway: &Gateway,
    evaluators: &EvaluatorRunner,
    opts: &RunOptions,
) -> Result<NodeOutput, NodeError> {
    match &node.payload {
        NodePayload::TextFields(p) => Ok(NodeOutput::Fields {
            values: p.fields.iter().map(|f| f.raw().to_owned()).collect(),
        }),
        NodePayload::Prompt(p) => {
            let instances = expand(flow, node)?;
            let calls: Vec<(usize, u32)> = (0..instances.len())
                .flat_map(|i| (0..p.samples_per_prompt).map(move |s| (i, s)))
                .collect();
            let responses = crate::par::try_map::<_, _, NodeError, _>(opts.parallelism, &calls, |&(i, sample)| {
                let inst = &instances[i];
                let req = ChatRequest::new(&inst.model.provider, &inst.model.model, vec![Message::user(inst.literal_text())])
                    .with_temperature(inst.model.temperature)
                    .with_max_tokens(inst.model.max_tokens)
                    .with_tag("executor.prompt");
                let resp = gateway.complete(&req).map_err(|e| {
                    log::warn!("prompt request failed: {e}");
                    NodeError::Model(e.summary())
                })?;
                Ok(ResponseRecord {
                    instance: inst.clone(),
                    sample_index: sample,
                    text: resp.text,
                    usage: resp.usage,
                    latency_ms: resp.latency_ms,
                })
            })?;
            Ok(NodeOutput::Responses { instances, responses })
        }
        NodePayload::CodeEvaluator(p) => {
            if opts.check_only {
                evaluators.check(&p.language, &p.program)?;
                return Ok(NodeOutput::Scores { scores: Vec::new() });
            }
            let upstream = upstream_responses(flow, node, done);
            let inputs: Vec<EvalInput> = upstream
                .iter()
                .map(|(_, r)| EvalInput { text: r.text.clone(), model: r.instance.model.label(), vars: r.instance.flat_vars() })
                .collect();
            let outcomes = evaluators.run(&p.language, &p.program, &inputs)?;
            let scores = upstream
                .into_iter()
                .zip(outcomes)
                .map(|((rref, r), value)| EvalScore {
                    response: rref,
                    evaluator: node.id.clone(),
                    value: value.into(),
                    model: r.instance.model.label(),
                    vars: r.instance.flat_vars(),
                })
                .collect();
            Ok(NodeOutput::Scores { scores })
        }
        NodePayload::LlmScorer(p) => {
            let upstream = upstream_responses(flow, node, done);
            let schema = Schema::object([(
                "score",
                match &p.score_schema {
                    ScoreSchema::Boolean => Schema::Boolean,
                    ScoreSchema::Number => Schema::unit_interval(),
                    ScoreSchema::Categorical { labels } => Schema::enumeration(labels.iter().cloned()),
                },
            )]);
            let scores = crate::par::try_map::<_, _, NodeError, _>(opts.parallelism, &upstream, |(rref, r)| {
                let mut vars = r.instance.flat_vars();
                vars.insert(RESPONSE_PLACEHOLDER.to_owned(), escape(&r.text));
                let rubric = p
                    .rubric_prompt
                    .render_map(&vars)
                    .map_err(|v| NodeError::Model(format!("rubric variable {v} has no value")))?;
                let req = ChatRequest::new(
                    &p.judge_model.provider,
                    &p.judge_model.model,
                    vec![
                        Message::system("You grade a model response against a rubric. Reply with a JSON object holding the score."),
                        Message::user(unescape(&rubric)),
                    ],
                )
                .with_temperature(0.0)
                .with_max_tokens(p.judge_model.max_tokens)
                .with_tag("executor.judge");
                let reply = gateway
                    .complete_structured(&req, &schema, 2)
                    .map_err(|e| {
                        log::warn!("judge request failed: {e}");
                        NodeError::Model(e.summary())
                    })?;
                let value = match &reply.value["score"] {
                    serde_json::Value::Bool(b) => ScoreValue::Bool(*b),
                    serde_json::Value::Number(n) => ScoreValue::Number(n.as_f64().unwrap_or(f64::NAN)),
                    v => ScoreValue::Label(v.as_str().unwrap_or_default().to_owned()),
                };
                Ok(EvalScore {
                    response: rref.clone(),
                    evaluator: node.id.clone(),
                    value,
                    model: r.instance.model.label(),
                    vars: r.instance.flat_vars(),
                })
            })?;
            Ok(NodeOutput::Scores { scores })
        }
        NodePayload::Vis(p) => {
            let mut scores = Vec::new();
            for e in flow.incoming(&node.id) {
                if let Some(o) = done.get(&e.from_node) {
                    scores.extend(o.scores().iter().cloned());
                }
            }
            Ok(NodeOutput::Aggregates { rows: aggregate(&scores, &p.group_by, p.metric)? })
        }
    }
}

/// Kinds that produce gateway traffic when run.
pub fn calls_models(kind: NodeKind) -> bool {
    matches!(kind, NodeKind::Prompt | NodeKind::LLMScorer)
}
