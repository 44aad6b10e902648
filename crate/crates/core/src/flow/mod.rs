//! The flow document: typed nodes, edges between handles, canvas positions.

mod catalog;
mod document;
mod template;
mod topo;
mod validate;

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use catalog::{CatalogEntry, ConnectionRule, GeneratedBy, InputHandle, NodeCatalog};
pub use document::{deserialize, serialize, SchemaError, SCHEMA_VERSION};
pub use template::{escape, parse_template, unescape, TemplateError, TemplateString};
pub use topo::topological_order;
pub use validate::{validate, Rule, ValidationReport, Violation};

/// Output handle of TextFields nodes.
pub const FIELDS_HANDLE: &str = "fields";
/// Output handle of Prompt and evaluator nodes, and input handle of
/// evaluator and Vis nodes.
pub const RESPONSES_HANDLE: &str = "responses";
/// Placeholder an LLM scorer rubric uses for the response under review.
pub const RESPONSE_PLACEHOLDER: &str = "response";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    TextFields,
    Prompt,
    CodeEvaluator,
    LLMScorer,
    Vis,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] = [
        NodeKind::TextFields,
        NodeKind::Prompt,
        NodeKind::CodeEvaluator,
        NodeKind::LLMScorer,
        NodeKind::Vis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::TextFields => "TextFields",
            NodeKind::Prompt => "Prompt",
            NodeKind::CodeEvaluator => "CodeEvaluator",
            NodeKind::LLMScorer => "LLMScorer",
            NodeKind::Vis => "Vis",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        NodeKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn output_handle(self) -> &'static str {
        match self {
            NodeKind::TextFields => FIELDS_HANDLE,
            _ => RESPONSES_HANDLE,
        }
    }

    pub fn is_evaluator(self) -> bool {
        matches!(self, NodeKind::CodeEvaluator | NodeKind::LLMScorer)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

/// A model to query: provider profile id, model name, sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub provider: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_max_tokens() -> u32 {
    512
}

impl ModelRef {
    pub fn new(provider: impl Into<String>, model: impl Into<String>) -> Self {
        ModelRef {
            provider: provider.into(),
            model: model.into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
        }
    }

    /// `provider/model`, the label used for grouping by model.
    pub fn label(&self) -> String {
        format!("{}/{}", self.provider, self.model)
    }

    /// Parses `provider/model`. A bare name gets the given default provider.
    pub fn parse_label(label: &str, default_provider: &str) -> Option<ModelRef> {
        let label = label.trim();
        if label.is_empty() {
            return None;
        }
        match label.split_once('/') {
            Some((p, m)) if !p.is_empty() && !m.is_empty() => Some(ModelRef::new(p, m)),
            Some(_) => None,
            None => Some(ModelRef::new(default_provider, label)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSchema {
    Boolean,
    /// A number in `[0, 1]`.
    Number,
    Categorical { labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Model,
    Variable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mean,
    PassRate,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextFieldsPayload {
    pub fields: Vec<TemplateString>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPayload {
    pub template: TemplateString,
    pub models: Vec<ModelRef>,
    pub samples_per_prompt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeEvaluatorPayload {
    pub language: String,
    pub program: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmScorerPayload {
    pub rubric_prompt: TemplateString,
    pub judge_model: ModelRef,
    pub score_schema: ScoreSchema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisPayload {
    pub group_by: GroupBy,
    pub metric: Metric,
}

/// Kind-specific node body. The JSON form carries no tag; the node's `kind`
/// says which shape is expected and [`validate`] reports a mismatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodePayload {
    TextFields(TextFieldsPayload),
    Prompt(PromptPayload),
    CodeEvaluator(CodeEvaluatorPayload),
    LlmScorer(LlmScorerPayload),
    Vis(VisPayload),
}

impl NodePayload {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodePayload::TextFields(_) => NodeKind::TextFields,
            NodePayload::Prompt(_) => NodeKind::Prompt,
            NodePayload::CodeEvaluator(_) => NodeKind::CodeEvaluator,
            NodePayload::LlmScorer(_) => NodeKind::LLMScorer,
            NodePayload::Vis(_) => NodeKind::Vis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub title: String,
    pub x: f64,
    pub y: f64,
    pub payload: NodePayload,
}

impl Node {
    pub fn new(id: impl Into<String>, title: impl Into<String>, payload: NodePayload) -> Self {
        Node {
            id: id.into(),
            kind: payload.kind(),
            title: title.into(),
            x: 0.0,
            y: 0.0,
            payload,
        }
    }

    pub fn text_fields(id: &str, title: &str, fields: Vec<TemplateString>) -> Self {
        Node::new(id, title, NodePayload::TextFields(TextFieldsPayload { fields }))
    }

    pub fn prompt(id: &str, title: &str, template: TemplateString, models: Vec<ModelRef>) -> Self {
        Node::new(
            id,
            title,
            NodePayload::Prompt(PromptPayload {
                template,
                models,
                samples_per_prompt: 1,
            }),
        )
    }

    pub fn position(&self) -> Position {
        Position { x: self.x, y: self.y }
    }

    /// Variables that must be bound by an incoming edge.
    pub fn input_variables(&self) -> Vec<String> {
        match &self.payload {
            NodePayload::TextFields(p) => {
                let mut seen: Vec<String> = Vec::new();
                for f in &p.fields {
                    for v in f.variables() {
                        if !seen.contains(v) {
                            seen.push(v.clone());
                        }
                    }
                }
                seen
            }
            NodePayload::Prompt(p) => p.template.variables().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn as_text_fields(&self) -> Option<&TextFieldsPayload> {
        match &self.payload {
            NodePayload::TextFields(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_prompt(&self) -> Option<&PromptPayload> {
        match &self.payload {
            NodePayload::Prompt(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from_node: String,
    pub from_handle: String,
    pub to_node: String,
    pub to_handle: String,
}

impl Edge {
    pub fn new(from_node: &str, from_handle: &str, to_node: &str, to_handle: &str) -> Self {
        Edge {
            from_node: from_node.to_owned(),
            from_handle: from_handle.to_owned(),
            to_node: to_node.to_owned(),
            to_handle: to_handle.to_owned(),
        }
    }

    /// `from:handle->to:handle`, used as the edge's identifier in reports.
    pub fn label(&self) -> String {
        format!(
            "{}:{}->{}:{}",
            self.from_node, self.from_handle, self.to_node, self.to_handle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Generated,
    Manual,
    Edited,
}

/// A pipeline graph. Nodes are kept sorted by id and edges by
/// `(from_node, from_handle, to_node, to_handle)`; every constructor
/// canonicalizes, so two flows with the same content compare equal and
/// serialize to the same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    id: String,
    name: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    created_at: DateTime<Utc>,
    provenance: Provenance,
    allow_unbound: bool,
}

impl Flow {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        created_at: DateTime<Utc>,
        provenance: Provenance,
    ) -> Self {
        let mut flow = Flow {
            id: id.into(),
            name: name.into(),
            nodes,
            edges,
            created_at,
            provenance,
            allow_unbound: false,
        };
        flow.canonicalize();
        flow
    }

    fn canonicalize(&mut self) {
        self.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        self.edges.sort();
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn allow_unbound(&self) -> bool {
        self.allow_unbound
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes
            .binary_search_by(|n| n.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.nodes[i])
            .or_else(|| self.nodes.iter().find(|n| n.id == id))
    }

    pub fn incoming<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to_node == node_id)
    }

    pub fn outgoing<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from_node == node_id)
    }

    /// The edge feeding `variable` on `node_id`, if exactly one exists.
    pub fn binding_edge(&self, node_id: &str, variable: &str) -> Option<&Edge> {
        let mut it = self
            .edges
            .iter()
            .filter(|e| e.to_node == node_id && e.to_handle == variable);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }

    /// Every node with a directed path to `node_id`.
    pub fn ancestors(&self, node_id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![node_id.to_owned()];
        while let Some(cur) = stack.pop() {
            for e in self.incoming(&cur) {
                if seen.insert(e.from_node.clone()) {
                    stack.push(e.from_node.clone());
                }
            }
        }
        seen.remove(node_id);
        seen
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn with_allow_unbound(mut self, allow: bool) -> Self {
        self.allow_unbound = allow;
        self
    }

    pub fn with_nodes(mut self, nodes: Vec<Node>) -> Self {
        self.nodes = nodes;
        self.canonicalize();
        self
    }

    pub fn with_edges(mut self, edges: Vec<Edge>) -> Self {
        self.edges = edges;
        self.canonicalize();
        self
    }

    pub fn into_parts(self) -> (Vec<Node>, Vec<Edge>) {
        (self.nodes, self.edges)
    }
}
