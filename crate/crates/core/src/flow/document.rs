//! Canonical `.flow.json` encoding.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Edge, Flow, Node, Provenance};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema error at {path}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDocument {
    schema_version: u32,
    id: String,
    name: String,
    created_at: DateTime<Utc>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    allow_unbound: bool,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Pretty-printed JSON with a trailing newline. Key order follows the struct
/// declarations and nodes/edges are already in canonical order, so equal
/// flows give equal bytes.
pub fn serialize(flow: &Flow) -> Vec<u8> {
    let doc = FlowDocument {
        schema_version: SCHEMA_VERSION,
        id: flow.id.clone(),
        name: flow.name.clone(),
        created_at: flow.created_at,
        provenance: flow.provenance,
        allow_unbound: flow.allow_unbound,
        nodes: flow.nodes.clone(),
        edges: flow.edges.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("flow documents always serialize");
    out.push(b'\n');
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Flow, SchemaError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: FlowDocument = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        SchemaError {
            path: if path == "." { "$".into() } else { path },
            message: err.into_inner().to_string(),
        }
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SchemaError {
            path: "schema_version".into(),
            message: format!("unsupported schema version {}", doc.schema_version),
        });
    }
    Ok(Flow::new(doc.id, doc.name, doc.nodes, doc.edges, doc.created_at, doc.provenance)
        .with_allow_unbound(doc.allow_unbound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{
        parse_template, CodeEvaluatorPayload, GroupBy, LlmScorerPayload, Metric, ModelRef,
        NodePayload, ScoreSchema, VisPayload,
    };
    use chrono::TimeZone;

    fn sample() -> Flow {
        let t = |s: &str| parse_template(s).unwrap();
        let nodes = vec![
            Node::text_fields("node-2", "question", vec![t("What is 2+2?")]),
            Node::text_fields("node-1", "persona", vec![t("a pirate"), t("a poet")]),
            Node::prompt(
                "node-3",
                "ask",
                t("You are {persona}. {question}"),
                vec![ModelRef::new("openai", "gpt-4o")],
            ),
            Node::new(
                "node-4",
                "check",
                NodePayload::CodeEvaluator(CodeEvaluatorPayload {
                    language: "expr".into(),
                    program: "evaluate(r) = contains(r.text, \"4\")".into(),
                }),
            ),
            Node::new(
                "node-5",
                "judge",
                NodePayload::LlmScorer(LlmScorerPayload {
                    rubric_prompt: t("Is this polite? {response}"),
                    judge_model: ModelRef::new("openai", "gpt-4o"),
                    score_schema: ScoreSchema::Categorical { labels: vec!["yes".into(), "no".into()] },
                }),
            ),
            Node::new(
                "node-6",
                "vis",
                NodePayload::Vis(VisPayload { group_by: GroupBy::Variable("persona".into()), metric: Metric::Count }),
            ),
        ];
        let edges = vec![
            Edge::new("node-2", "fields", "node-3", "question"),
            Edge::new("node-1", "fields", "node-3", "persona"),
            Edge::new("node-3", "responses", "node-4", "responses"),
        ];
        Flow::new("flow-1", "sample", nodes, edges, Utc.timestamp_opt(1_700_000_000, 0).unwrap(), Provenance::Generated)
    }

    #[test]
    fn round_trip_is_identity() {
        let f = sample();
        let bytes = serialize(&f);
        assert_eq!(deserialize(&bytes).unwrap(), f);
        assert_eq!(serialize(&deserialize(&bytes).unwrap()), bytes);
    }

    #[test]
    fn top_level_keys_in_canonical_order() {
        let v: serde_json::Value = serde_json::from_slice(&serialize(&sample())).unwrap();
        let node = &v["nodes"][0];
        for key in ["id", "kind", "title", "x", "y", "payload"] {
            assert!(node.get(key).is_some(), "{key}");
        }
        let text = String::from_utf8(serialize(&sample())).unwrap();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("schema_version") < pos("id"));
        assert!(pos("name") < pos("nodes"));
        assert!(pos("nodes") < pos("edges"));
        assert_eq!(v["nodes"][0]["id"], "node-1");
    }

    #[test]
    fn unknown_kind_reports_path() {
        let mut v: serde_json::Value = serde_json::from_slice(&serialize(&sample())).unwrap();
        v["nodes"][2]["kind"] = "Join".into();
        let err = deserialize(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert_eq!(err.path, "nodes[2].kind");
    }

    #[test]
    fn bad_payload_and_version() {
        let mut v: serde_json::Value = serde_json::from_slice(&serialize(&sample())).unwrap();
        v["nodes"][0]["payload"] = serde_json::json!({"bogus": 1});
        let err = deserialize(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert_eq!(err.path, "nodes[0].payload");

        let mut v: serde_json::Value = serde_json::from_slice(&serialize(&sample())).unwrap();
        v["schema_version"] = 2.into();
        assert_eq!(deserialize(&serde_json::to_vec(&v).unwrap()).unwrap_err().path, "schema_version");

        let err = deserialize(b"{ not json").unwrap_err();
        assert!(!err.message.is_empty());
    }

    #[test]
    fn malformed_template_is_schema_error() {
        let mut v: serde_json::Value = serde_json::from_slice(&serialize(&sample())).unwrap();
        v["nodes"][2]["payload"]["template"] = "broken {".into();
        let err = deserialize(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(err.path.starts_with("nodes[2].payload"), "{}", err.path);
    }
}
