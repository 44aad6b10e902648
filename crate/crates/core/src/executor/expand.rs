use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{unescape, Flow, ModelRef, Node, NodePayload, TemplateString};

/// Maximum nesting of chained templates below a Prompt node.
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpandError {
    #[error("variable {variable} of node {node} is not connected")]
    UnboundVariable { node: String, variable: String },
    #[error("template chain below node {node} is deeper than {MAX_DEPTH}")]
    DepthExceeded { node: String },
    #[error("node {0} is not a Prompt node")]
    NotAPrompt(String),
    #[error("node {node} cannot supply variable {variable}")]
    UnsupportedSource { node: String, variable: String },
}

/// The value chosen for one variable, with where it came from. When the
/// value was itself a template, `template` holds it and `inner` the choices
/// made while resolving it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub value: String,
    pub source_node: String,
    pub field_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inner: BTreeMap<String, Binding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    /// Fully substituted text; `\{` and `\}` escapes are kept.
    pub final_text: String,
    pub bindings: BTreeMap<String, Binding>,
    pub model: ModelRef,
}

impl PromptInstance {
    /// The text sent to the model, with brace escapes resolved.
    pub fn literal_text(&self) -> String {
        unescape(&self.final_text)
    }

    /// Every variable chosen anywhere in the chain, name to value. Outer
    /// bindings win over nested ones of the same name.
    pub fn flat_vars(&self) -> BTreeMap<String, String> {
        fn walk(b: &BTreeMap<String, Binding>, out: &mut BTreeMap<String, String>) {
            for (k, v) in b {
                out.entry(k.clone()).or_insert_with(|| v.value.clone());
            }
            for v in b.values() {
                walk(&v.inner, out);
            }
        }
        let mut out = BTreeMap::new();
        walk(&self.bindings, &mut out);
        out
    }

    /// Leaf (non-template) choices, used to tell data bindings from prompt
    /// alternatives.
    pub fn leaf_bindings(&self) -> BTreeMap<String, String> {
        fn walk(b: &BTreeMap<String, Binding>, out: &mut BTreeMap<String, String>) {
            for (k, v) in b {
                if v.template.is_none() {
                    out.insert(k.clone(), v.value.clone());
                } else {
                    walk(&v.inner, out);
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(&self.bindings, &mut out);
        out
    }
}

/// Every prompt the node would send: the cross product of the resolved
/// values of its variables (first variable varies slowest), crossed with its
/// models (innermost).
pub fn expand(flow: &Flow, prompt: &Node) -> Result<Vec<PromptInstance>, ExpandError> {
    let NodePayload::Prompt(p) = &prompt.payload else {
        return Err(ExpandError::NotAPrompt(prompt.id.clone()));
    };
    let resolved = resolve_template(flow, &prompt.id, &p.template, 0)?;
    let mut out = Vec::with_capacity(resolved.len() * p.models.len());
    for (text, bindings) in resolved {
        for model in &p.models {
            out.push(PromptInstance { final_text: text.clone(), bindings: bindings.clone(), model: model.clone() });
        }
    }
    Ok(out)
}

type Resolved = (String, BTreeMap<String, Binding>);

fn resolve_template(
    flow: &Flow,
    node_id: &str,
    template: &TemplateString,
    depth: usize,
) -> Result<Vec<Resolved>, ExpandError> {
    if depth > MAX_DEPTH {
        return Err(ExpandError::DepthExceeded { node: node_id.to_owned() });
    }
    let mut per_var: Vec<(&str, Vec<Binding>)> = Vec::new();
    for var in template.variables() {
        let edge = flow.binding_edge(node_id, var).ok_or_else(|| ExpandError::UnboundVariable {
            node: node_id.to_owned(),
            variable: var.clone(),
        })?;
        per_var.push((var, source_values(flow, &edge.from_node, var, depth + 1)?));
    }

    let mut combos: Vec<BTreeMap<String, Binding>> = vec![BTreeMap::new()];
    for (var, values) in &per_var {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for v in values {
                let mut c = combo.clone();
                c.insert(var.to_string(), v.clone());
                next.push(c);
            }
        }
        combos = next;
    }

    Ok(combos
        .into_iter()
        .map(|bindings| {
            let text = template
                .render(|name| bindings.get(name).map(|b| b.value.as_str()))
                .expect("every variable has a binding");
            (text, bindings)
        })
        .collect())
}

fn source_values(flow: &Flow, source: &str, var: &str, depth: usize) -> Result<Vec<Binding>, ExpandError> {
    let unsupported = || ExpandError::UnsupportedSource { node: source.to_owned(), variable: var.to_owned() };
    let node = flow.node(source).ok_or_else(unsupported)?;
    let fields = node.as_text_fields().ok_or_else(unsupported)?;
    let mut out = Vec::new();
    for (index, field) in fields.fields.iter().enumerate() {
        if !field.has_variables() {
            out.push(Binding {
                value: field.raw().to_owned(),
                source_node: source.to_owned(),
                field_index: index,
                template: None,
                inner: BTreeMap::new(),
            });
            continue;
        }
        for (value, inner) in resolve_template(flow, source, field, depth)? {
            out.push(Binding {
                value,
                source_node: source.to_owned(),
                field_index: index,
                template: Some(field.raw().to_owned()),
                inner,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{parse_template, Edge, Provenance};
    use chrono::DateTime;

    fn t(s: &str) -> TemplateString {
        parse_template(s).unwrap()
    }

    fn flow(nodes: Vec<Node>, edges: Vec<Edge>) -> Flow {
        Flow::new("f", "f", nodes, edges, DateTime::UNIX_EPOCH, Provenance::Manual)
    }

    fn models(n: usize) -> Vec<ModelRef> {
        (0..n).map(|i| ModelRef::new("p", format!("m{i}"))).collect()
    }

    #[test]
    fn chained_templates_tweet_shape() {
        let f = flow(
            vec![
                Node::text_fields(
                    "tpl",
                    "prompts",
                    vec![t("Summarize {text} as a tweet"), t("Condense {text} to 144 chars")],
                ),
                Node::text_fields("txt", "text", vec![t("A long paragraph.")]),
                Node::prompt("p", "p", t("{prompts}"), models(2)),
            ],
            vec![Edge::new("txt", "fields", "tpl", "text"), Edge::new("tpl", "fields", "p", "prompts")],
        );
        let out = expand(&f, f.node("p").unwrap()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].final_text, "Summarize A long paragraph. as a tweet");
        assert_eq!(out[0].model.model, "m0");
        assert_eq!(out[1].model.model, "m1");
        assert_eq!(out[2].final_text, "Condense A long paragraph. to 144 chars");
        let b = &out[2].bindings["prompts"];
        assert_eq!(b.template.as_deref(), Some("Condense {text} to 144 chars"));
        assert_eq!(b.inner["text"].value, "A long paragraph.");
        assert_eq!(out[2].leaf_bindings(), BTreeMap::from([("text".into(), "A long paragraph.".into())]));
        assert_eq!(out[2].flat_vars().len(), 2);
    }

    #[test]
    fn persona_cross_question_cross_models() {
        let f = flow(
            vec![
                Node::text_fields("a", "persona", vec![t("a pirate"), t("a poet"), t("a child")]),
                Node::text_fields("b", "question", vec![t("What is the Gaussian integral?")]),
                Node::prompt("p", "p", t("You are {persona}. {question}"), models(4)),
            ],
            vec![Edge::new("a", "fields", "p", "persona"), Edge::new("b", "fields", "p", "question")],
        );
        let out = expand(&f, f.node("p").unwrap()).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out[..4].iter().all(|i| i.final_text.starts_with("You are a pirate.")));
    }

    #[test]
    fn zero_variables_one_instance() {
        let f = flow(vec![Node::prompt("p", "p", t(r"Say \{hi\}"), models(1))], vec![]);
        let out = expand(&f, f.node("p").unwrap()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].final_text, r"Say \{hi\}");
        assert_eq!(out[0].literal_text(), "Say {hi}");
    }

    #[test]
    fn unbound_and_non_prompt() {
        let f = flow(vec![Node::prompt("p", "p", t("{x}"), models(1))], vec![]);
        assert_eq!(
            expand(&f, f.node("p").unwrap()),
            Err(ExpandError::UnboundVariable { node: "p".into(), variable: "x".into() })
        );
        let tf = Node::text_fields("a", "a", vec![]);
        assert_eq!(expand(&f, &tf), Err(ExpandError::NotAPrompt("a".into())));
    }

    #[test]
    fn depth_cap() {
        let mut nodes = vec![Node::text_fields("n0", "v0", vec![t("leaf")])];
        let mut edges = Vec::new();
        for i in 1..=10 {
            nodes.push(Node::text_fields(&format!("n{i}"), &format!("v{i}"), vec![t(&format!("{{v{}}}", i - 1))]));
            edges.push(Edge::new(&format!("n{}", i - 1), "fields", &format!("n{i}"), &format!("v{}", i - 1)));
        }
        nodes.push(Node::prompt("p", "p", t("{v10}"), models(1)));
        edges.push(Edge::new("n10", "fields", "p", "v10"));
        let f = flow(nodes, edges);
        assert!(matches!(expand(&f, f.node("p").unwrap()), Err(ExpandError::DepthExceeded { .. })));
    }
}
