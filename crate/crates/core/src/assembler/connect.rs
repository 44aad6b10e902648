use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;
use thiserror::Error;

use crate::config::Config;
use crate::executor::{expr::Program, BUILTIN_LANGUAGE};
use crate::flow::{
    Edge, GroupBy, InputHandle, Metric, Node, NodeCatalog, NodeKind, NodePayload, ScoreSchema, VisPayload,
    FIELDS_HANDLE, RESPONSES_HANDLE,
};
use crate::gateway::{ChatRequest, Gateway, Message, Schema};
use crate::planner::Plan;
use crate::prompts::PromptBundle;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no input can be connected to variable {variable} of node {node}")]
pub struct ConnectionUnresolvable {
    pub variable: String,
    pub node: String,
}

/// Generated nodes in plan order.
fn ordered<'a>(plan: &Plan, nodes: &'a BTreeMap<String, Node>) -> Vec<&'a Node> {
    plan.tasks.iter().filter_map(|t| nodes.get(&t.id)).collect()
}

fn dependency_nodes<'a>(plan: &Plan, task: &str, nodes: &'a BTreeMap<String, Node>) -> Vec<&'a Node> {
    plan.task(task)
        .map(|t| t.depends_on.iter().filter_map(|d| nodes.get(d)).collect())
        .unwrap_or_default()
}

fn descendants(edges: &[Edge], from: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_owned()];
    while let Some(cur) = stack.pop() {
        for e in edges.iter().filter(|e| e.from_node == cur) {
            if seen.insert(e.to_node.clone()) {
                stack.push(e.to_node.clone());
            }
        }
    }
    seen
}

/// Wires generated nodes. Template variables bind to the one dependency
/// whose title equals the variable name; anything left over is resolved by
/// a connection agent over every eligible node in the flow. Evaluators take
/// the responses of the Prompt nodes they depend on.
pub fn connect(
    nodes: &BTreeMap<String, Node>,
    plan: &Plan,
    catalog: &NodeCatalog,
    gateway: &Gateway,
    bundle: &PromptBundle,
    cfg: &Config,
) -> Result<Vec<Edge>, ConnectionUnresolvable> {
    let mut edges: Vec<Edge> = Vec::new();
    let mut pending: Vec<(&Node, String)> = Vec::new();
    let task_of: BTreeMap<&str, &str> = plan
        .tasks
        .iter()
        .filter_map(|t| nodes.get(&t.id).map(|n| (n.id.as_str(), t.id.as_str())))
        .collect();

    for node in ordered(plan, nodes) {
        let deps = dependency_nodes(plan, task_of[node.id.as_str()], nodes);
        if node.kind.is_evaluator() {
            let mut sources: Vec<&Node> = deps.iter().copied().filter(|n| n.kind == NodeKind::Prompt).collect();
            if sources.is_empty() {
                sources = ordered(plan, nodes).into_iter().filter(|n| n.kind == NodeKind::Prompt).collect();
            }
            for s in sources {
                edges.push(Edge::new(&s.id, RESPONSES_HANDLE, &node.id, RESPONSES_HANDLE));
            }
            continue;
        }
        for var in node.input_variables() {
            let matches: Vec<&&Node> =
                deps.iter().filter(|n| n.kind == NodeKind::TextFields && n.title == var).collect();
            if let [only] = matches.as_slice() {
                edges.push(Edge::new(&only.id, FIELDS_HANDLE, &node.id, &var));
            } else {
                pending.push((node, var));
            }
        }
    }

    for (node, var) in pending {
        let below = descendants(&edges, &node.id);
        let candidates: Vec<&Node> = ordered(plan, nodes)
            .into_iter()
            .filter(|c| c.id != node.id && !below.contains(&c.id))
            .filter(|c| catalog.permits(c.kind, c.kind.output_handle(), node.kind, InputHandle::Variable))
            .collect();
        let unresolvable = || ConnectionUnresolvable { variable: var.clone(), node: node.id.clone() };
        if candidates.is_empty() {
            return Err(unresolvable());
        }
        let source = ask_agent(node, &var, &candidates, gateway, bundle, cfg).ok_or_else(unresolvable)?;
        log::info!("connection agent bound {}.{var} to {source}", node.id);
        edges.push(Edge::new(&source, FIELDS_HANDLE, &node.id, &var));
    }

    edges.sort();
    edges.dedup();
    Ok(edges)
}

fn ask_agent(
    node: &Node,
    var: &str,
    candidates: &[&Node],
    gateway: &Gateway,
    bundle: &PromptBundle,
    cfg: &Config,
) -> Option<String> {
    let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
    let schema = Schema::object([("source", Schema::enumeration(ids.clone()))]);
    let body = json!({
        "node": {"id": node.id, "kind": node.kind, "title": node.title, "payload": node.payload},
        "variable": var,
        "candidates": candidates.iter().map(|c| json!({"id": c.id, "title": c.title, "payload": c.payload})).collect::<Vec<_>>(),
    });
    let p = &cfg.backend_model;
    let req = ChatRequest::new(
        &p.provider,
        &p.model,
        vec![
            Message::system(bundle.raw("assembler/connect").to_owned()),
            Message::user(serde_json::to_string_pretty(&body).expect("serializable")),
        ],
    )
    .with_temperature(p.temperature)
    .with_max_tokens(p.max_tokens)
    .with_tag("connect");
    match gateway.complete_structured(&req, &schema, cfg.generation.structured_attempts) {
        Ok(out) => out.value["source"].as_str().map(str::to_owned).filter(|s| ids.contains(s)),
        Err(e) => {
            log::warn!("connection agent failed for {}.{var}: {e}", node.id);
            None
        }
    }
}

/// The Vis node added when the flow has an evaluator: fed by the first
/// evaluator in plan order, grouped by model when its Prompt queries more
/// than one, otherwise by the variable with the most values.
pub fn vis_rule(nodes: &BTreeMap<String, Node>, plan: &Plan, edges: &[Edge], id: &str) -> Option<(Node, Edge)> {
    let evaluator = ordered(plan, nodes).into_iter().find(|n| n.kind.is_evaluator())?;
    let prompt_node = edges
        .iter()
        .filter(|e| e.to_node == evaluator.id)
        .find_map(|e| nodes.values().find(|n| n.id == e.from_node && n.kind == NodeKind::Prompt));
    let field_count = |target: &str, var: &str| -> usize {
        edges
            .iter()
            .find(|e| e.to_node == target && e.to_handle == var)
            .and_then(|e| nodes.values().find(|n| n.id == e.from_node))
            .and_then(Node::as_text_fields)
            .map(|t| t.fields.len())
            .unwrap_or(0)
    };

    let group_by = match prompt_node.and_then(|n| n.as_prompt().map(|p| (n, p))) {
        Some((n, p)) if p.models.len() <= 1 && !p.template.variables().is_empty() => {
            let mut best = &p.template.variables()[0];
            for v in p.template.variables() {
                if field_count(&n.id, v) > field_count(&n.id, best) {
                    best = v;
                }
            }
            GroupBy::Variable(best.clone())
        }
        _ => GroupBy::Model,
    };

    let metric = match &evaluator.payload {
        NodePayload::CodeEvaluator(c) if c.language == BUILTIN_LANGUAGE => {
            match Program::parse(&c.program).ok().and_then(|p| p.returns_boolean()) {
                Some(true) => Metric::PassRate,
                _ => Metric::Mean,
            }
        }
        NodePayload::LlmScorer(s) => match s.score_schema {
            ScoreSchema::Boolean => Metric::PassRate,
            ScoreSchema::Number => Metric::Mean,
            ScoreSchema::Categorical { .. } => Metric::Count,
        },
        _ => Metric::Mean,
    };
    let title = match &group_by {
        GroupBy::Model => "Results by model".to_owned(),
        GroupBy::Variable(v) => format!("Results by {v}"),
    };
    let vis = Node::new(id, title, NodePayload::Vis(VisPayload { group_by, metric }));
    let edge = Edge::new(&evaluator.id, RESPONSES_HANDLE, id, RESPONSES_HANDLE);
    Some((vis, edge))
}
