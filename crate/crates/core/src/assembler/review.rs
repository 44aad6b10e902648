use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::flow::{Flow, NodePayload};
use crate::gateway::{ChatRequest, Gateway, Message, Schema};
use crate::intent::IntentSpec;
use crate::prompts::PromptBundle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewIssue {
    pub criterion: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub pass: bool,
    pub issues: Vec<ReviewIssue>,
    pub suggestion: Option<String>,
}

impl ReviewVerdict {
    pub fn passed() -> Self {
        ReviewVerdict { pass: true, issues: Vec::new(), suggestion: None }
    }

    /// Text appended to the intent's requirements when replanning.
    pub fn replan_note(&self) -> String {
        match self.suggestion.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            Some(s) => s.to_owned(),
            None => self
                .issues
                .iter()
                .map(|i| format!("{}: {}", i.criterion, i.detail))
                .collect::<Vec<_>>()
                .join("; "),
        }
    }
}

/// Compact description of a flow for the reviewer.
pub fn summarize(flow: &Flow) -> Value {
    let nodes: Vec<Value> = flow
        .nodes()
        .iter()
        .map(|n| {
            let detail = match &n.payload {
                NodePayload::TextFields(p) => json!({"fields": p.fields}),
                NodePayload::Prompt(p) => json!({
                    "template": p.template,
                    "models": p.models.iter().map(|m| m.label()).collect::<Vec<_>>(),
                }),
                NodePayload::CodeEvaluator(p) => json!({"language": p.language, "program": p.program}),
                NodePayload::LlmScorer(p) => json!({"rubric": p.rubric_prompt, "score": p.score_schema}),
                NodePayload::Vis(p) => json!({"group_by": p.group_by, "metric": p.metric}),
            };
            json!({"id": n.id, "kind": n.kind, "title": n.title, "content": detail})
        })
        .collect();
    json!({"nodes": nodes, "edges": flow.edges().iter().map(|e| e.label()).collect::<Vec<_>>()})
}

fn verdict_schema() -> Schema {
    Schema::object([
        ("pass", Schema::Boolean),
        ("issues", Schema::array(Schema::object([("criterion", Schema::string()), ("detail", Schema::string())]))),
        ("suggestion", Schema::string().nullable()),
    ])
}

/// Checks the flow against the intent. A reviewer that cannot produce a
/// usable verdict does not block generation: the flow passes.
pub fn review(flow: &Flow, intent: &IntentSpec, gateway: &Gateway, bundle: &PromptBundle, cfg: &Config) -> ReviewVerdict {
    let body = json!({
        "goal": intent.goal,
        "requirements": intent.requirements,
        "preferences": intent.preferences,
        "flow": summarize(flow),
    });
    let p = &cfg.backend_model;
    let req = ChatRequest::new(
        &p.provider,
        &p.model,
        vec![
            Message::system(bundle.raw("assembler/review").to_owned()),
            Message::user(serde_json::to_string_pretty(&body).expect("serializable")),
        ],
    )
    .with_temperature(p.temperature)
    .with_max_tokens(p.max_tokens)
    .with_tag("review");
    let check = |v: Value| -> Result<ReviewVerdict, String> {
        let verdict: ReviewVerdict = serde_json::from_value(v).map_err(|e| e.to_string())?;
        if verdict.pass && !verdict.issues.is_empty() {
            return Err("pass is true but issues are listed; set pass to false or remove the issues".into());
        }
        Ok(verdict)
    };
    match gateway.complete_checked(&req, &verdict_schema(), cfg.generation.structured_attempts, check) {
        Ok(v) => v.value,
        Err(e) => {
            log::warn!("reviewer gave no usable verdict, accepting the flow: {e}");
            ReviewVerdict::passed()
        }
    }
}
