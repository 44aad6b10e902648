use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{
    Flow, GroupBy, InputHandle, NodeCatalog, NodeKind, NodePayload, ScoreSchema, RESPONSES_HANDLE,
    RESPONSE_PLACEHOLDER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateNodeId,
    UnknownKind,
    PayloadMismatch,
    EmptyModelList,
    InvalidSamples,
    InvalidScoreSchema,
    MissingResponsePlaceholder,
    DanglingEdge,
    SelfLoop,
    Cycle,
    ConnectionNotPermitted,
    DuplicateBinding,
    UnboundVariable,
    InvalidGroupBy,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::DuplicateNodeId => "duplicate_node_id",
            Rule::UnknownKind => "unknown_kind",
            Rule::PayloadMismatch => "payload_mismatch",
            Rule::EmptyModelList => "empty_model_list",
            Rule::InvalidSamples => "invalid_samples",
            Rule::InvalidScoreSchema => "invalid_score_schema",
            Rule::MissingResponsePlaceholder => "missing_response_placeholder",
            Rule::DanglingEdge => "dangling_edge",
            Rule::SelfLoop => "self_loop",
            Rule::Cycle => "cycle",
            Rule::ConnectionNotPermitted => "connection_not_permitted",
            Rule::DuplicateBinding => "duplicate_binding",
            Rule::UnboundVariable => "unbound_variable",
            Rule::InvalidGroupBy => "invalid_group_by",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub node: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn rules(&self) -> BTreeSet<Rule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    fn node(&mut self, rule: Rule, node: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            node: Some(node.to_owned()),
            edge: None,
            detail: detail.into(),
        });
    }

    fn edge(&mut self, rule: Rule, edge: String, detail: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            node: None,
            edge: Some(edge),
            detail: detail.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            let at = v.node.as_deref().or(v.edge.as_deref()).unwrap_or("-");
            write!(f, "{} at {}: {}", v.rule, at, v.detail)?;
        }
        Ok(())
    }
}

/// Checks a flow against the structural rules and the catalog's connection
/// rules. An empty report means the executor can run the flow.
pub fn validate(flow: &Flow, catalog: &NodeCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut kinds: BTreeMap<&str, NodeKind> = BTreeMap::new();
    for node in flow.nodes() {
        if kinds.insert(node.id.as_str(), node.kind).is_some() {
            report.node(Rule::DuplicateNodeId, &node.id, "node id appears more than once");
        }
    }

    for node in flow.nodes() {
        if !catalog.contains(node.kind) {
            report.node(Rule::UnknownKind, &node.id, format!("{} is not in the catalog", node.kind));
        }
        if node.payload.kind() != node.kind {
            report.node(
                Rule::PayloadMismatch,
                &node.id,
                format!("kind {} carries a {} payload", node.kind, node.payload.kind()),
            );
            continue;
        }
        match &node.payload {
            NodePayload::Prompt(p) => {
                if p.models.is_empty() {
                    report.node(Rule::EmptyModelList, &node.id, "prompt node queries no models");
                }
                if p.samples_per_prompt == 0 {
                    report.node(Rule::InvalidSamples, &node.id, "samples_per_prompt must be >= 1");
                }
            }
            NodePayload::LlmScorer(p) => {
                if !p.rubric_prompt.contains_variable(RESPONSE_PLACEHOLDER) {
                    report.node(
                        Rule::MissingResponsePlaceholder,
                        &node.id,
                        "rubric prompt lacks the {response} placeholder",
                    );
                }
                if let ScoreSchema::Categorical { labels } = &p.score_schema {
                    if labels.is_empty() {
                        report.node(Rule::InvalidScoreSchema, &node.id, "categorical schema has no labels");
                    }
                }
            }
            _ => {}
        }
    }

    let mut structural_ok = Vec::with_capacity(flow.edges().len());
    for edge in flow.edges() {
        let label = edge.label();
        let mut ok = true;
        for end in [&edge.from_node, &edge.to_node] {
            if !kinds.contains_key(end.as_str()) {
                report.edge(Rule::DanglingEdge, label.clone(), format!("unknown node {end}"));
                ok = false;
            }
        }
        if edge.from_node == edge.to_node {
            report.edge(Rule::SelfLoop, label.clone(), "edge connects a node to itself");
            ok = false;
        }
        structural_ok.push(ok);
    }

    // Cycles: one violation per strongly connected component.
    let mut graph = DiGraph::<&str, ()>::new();
    let index: BTreeMap<&str, _> = kinds.keys().map(|&id| (id, graph.add_node(id))).collect();
    for (edge, ok) in flow.edges().iter().zip(&structural_ok) {
        if *ok {
            graph.add_edge(index[edge.from_node.as_str()], index[edge.to_node.as_str()], ());
        }
    }
    for scc in tarjan_scc(&graph) {
        if scc.len() > 1 {
            let mut ids: Vec<&str> = scc.iter().map(|&n| graph[n]).collect();
            ids.sort_unstable();
            report.node(Rule::Cycle, ids[0], format!("cycle through {}", ids.join(", ")));
        }
    }

    // Connection rules and bindings.
    let mut bound: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (edge, ok) in flow.edges().iter().zip(&structural_ok) {
        if !*ok {
            continue;
        }
        let (Some(source), Some(target)) = (flow.node(&edge.from_node), flow.node(&edge.to_node))
        else {
            continue;
        };
        let declared = target.input_variables();
        let handle = if edge.to_handle == RESPONSES_HANDLE && !declared.contains(&edge.to_handle) {
            InputHandle::Responses
        } else {
            InputHandle::Variable
        };
        let permitted = catalog.permits(source.kind, &edge.from_handle, target.kind, handle)
            && (handle == InputHandle::Responses || declared.contains(&edge.to_handle));
        if !permitted {
            report.edge(
                Rule::ConnectionNotPermitted,
                edge.label(),
                format!(
                    "{}.{} cannot feed {}.{}",
                    source.kind, edge.from_handle, target.kind, edge.to_handle
                ),
            );
            continue;
        }
        if handle == InputHandle::Variable {
            *bound.entry((edge.to_node.as_str(), edge.to_handle.as_str())).or_default() += 1;
        }
    }

    for node in flow.nodes() {
        for var in node.input_variables() {
            match bound.get(&(node.id.as_str(), var.as_str())).copied().unwrap_or(0) {
                0 if !flow.allow_unbound() => report.node(
                    Rule::UnboundVariable,
                    &node.id,
                    format!("variable {{{var}}} has no incoming edge"),
                ),
                0 | 1 => {}
                n => report.node(
                    Rule::DuplicateBinding,
                    &node.id,
                    format!("variable {{{var}}} is fed by {n} edges"),
                ),
            }
        }
    }

    // Variables named by scorers and Vis nodes must be reachable upstream.
    for node in flow.nodes() {
        let needs: Vec<(Rule, String)> = match &node.payload {
            NodePayload::LlmScorer(p) if node.kind == NodeKind::LLMScorer => p
                .rubric_prompt
                .variables()
                .iter()
                .filter(|v| v.as_str() != RESPONSE_PLACEHOLDER)
                .map(|v| (Rule::UnboundVariable, v.clone()))
                .collect(),
            NodePayload::Vis(p) if node.kind == NodeKind::Vis => match &p.group_by {
                GroupBy::Model => vec![],
                GroupBy::Variable(v) => vec![(Rule::InvalidGroupBy, v.clone())],
            },
            _ => continue,
        };
        if needs.is_empty() {
            continue;
        }
        let reachable = upstream_variables(flow, &node.id);
        for (rule, var) in needs {
            if !reachable.contains(&var) {
                report.node(rule, &node.id, format!("variable {var} is not bound by any upstream node"));
            }
        }
    }

    report
}

pub(crate) fn upstream_variables(flow: &Flow, node_id: &str) -> BTreeSet<String> {
    flow.ancestors(node_id)
        .iter()
        .filter_map(|id| flow.node(id))
        .flat_map(|n| n.input_variables())
        .collect()
}
