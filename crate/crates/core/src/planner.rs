//! Turns an [`IntentSpec`] into an ordered plan of node-creation tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::Config;
use crate::flow::{GeneratedBy, NodeCatalog, NodeKind};
use crate::gateway::{ChatRequest, Gateway, Message, Schema, StructuredError};
use crate::intent::IntentSpec;
use crate::prompts::PromptBundle;

/// Phrases that would indicate worked examples in the planner prompt.
pub const FEW_SHOT_MARKERS: &[&str] = &[
    "example",
    "e.g.",
    "for instance",
    "sample plan",
    "user:",
    "assistant:",
    "input:",
    "output:",
    "```",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub kind: String,
    pub instructions: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
    /// Node id reserved for this task's output.
    #[serde(default)]
    pub produces: String,
}

impl Task {
    pub fn node_kind(&self) -> Option<NodeKind> {
        NodeKind::parse(&self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub tasks: Vec<Task>,
    pub rationale: String,
}

impl Plan {
    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanRule {
    EmptyPlan,
    DuplicateId,
    UnknownKind,
    UnknownDependency,
    Cycle,
    EmptyInstructions,
}

impl PlanRule {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanRule::EmptyPlan => "empty_plan",
            PlanRule::DuplicateId => "duplicate_id",
            PlanRule::UnknownKind => "unknown_kind",
            PlanRule::UnknownDependency => "unknown_dependency",
            PlanRule::Cycle => "cycle",
            PlanRule::EmptyInstructions => "empty_instructions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub rule: PlanRule,
    pub task: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanReport {
    pub violations: Vec<PlanViolation>,
}

impl PlanReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: PlanRule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: PlanRule, task: Option<&str>, detail: String) {
        self.violations.push(PlanViolation { rule, task: task.map(str::to_owned), detail });
    }
}

impl fmt::Display for PlanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            match &v.task {
                Some(t) => writeln!(f, "{} (task {t}): {}", v.rule.as_str(), v.detail)?,
                None => writeln!(f, "{}: {}", v.rule.as_str(), v.detail)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("the planner did not return a usable plan")]
    StructuredOutputFailure(#[source] StructuredError),
    #[error("the planner's plan is invalid:\n{0}")]
    PlanInvalid(PlanReport),
}

pub fn validate_plan(plan: &Plan, catalog: &NodeCatalog) -> PlanReport {
    let mut report = PlanReport::default();
    if plan.tasks.is_empty() {
        report.push(PlanRule::EmptyPlan, None, "the plan has no tasks".into());
        return report;
    }
    let mut ids = BTreeSet::new();
    for t in &plan.tasks {
        if !ids.insert(t.id.as_str()) {
            report.push(PlanRule::DuplicateId, Some(&t.id), format!("task id {} is used more than once", t.id));
        }
        let plannable = t
            .node_kind()
            .and_then(|k| catalog.entry(k))
            .is_some_and(|e| e.generated_by == GeneratedBy::Agent);
        if !plannable {
            report.push(PlanRule::UnknownKind, Some(&t.id), format!("{} is not a node kind that can be planned", t.kind));
        }
        if t.instructions.trim().is_empty() {
            report.push(PlanRule::EmptyInstructions, Some(&t.id), "instructions are empty".into());
        }
    }
    for t in &plan.tasks {
        for d in &t.depends_on {
            if !ids.contains(d.as_str()) {
                report.push(PlanRule::UnknownDependency, Some(&t.id), format!("depends on unknown task {d}"));
            }
        }
    }
    if !report.has(PlanRule::DuplicateId) && topo_order(plan).is_none() {
        report.push(PlanRule::Cycle, None, "task dependencies form a cycle".into());
    }
    report
}

/// Task indices in dependency order, ties broken by plan position. `None`
/// when the dependencies are cyclic.
fn topo_order(plan: &Plan) -> Option<Vec<usize>> {
    let index: BTreeMap<&str, usize> = plan.tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut indegree = vec![0usize; plan.tasks.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); plan.tasks.len()];
    for (i, t) in plan.tasks.iter().enumerate() {
        let deps: BTreeSet<usize> = t.depends_on.iter().filter_map(|d| index.get(d.as_str()).copied()).collect();
        indegree[i] = deps.len();
        for d in deps {
            dependents[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..plan.tasks.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(plan.tasks.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &dependents[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.insert(j);
            }
        }
    }
    (order.len() == plan.tasks.len()).then_some(order)
}

/// Reorders a valid plan so dependencies come first and reserves node ids
/// `node-1`, `node-2`, ... in that order.
pub fn normalize(plan: Plan) -> Plan {
    let order = topo_order(&plan).expect("plan was validated");
    let mut tasks: Vec<Option<Task>> = plan.tasks.into_iter().map(Some).collect();
    let tasks = order
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let mut t = tasks[i].take().expect("each index once");
            t.produces = format!("node-{}", n + 1);
            t.depends_on.dedup();
            t
        })
        .collect();
    Plan { tasks, rationale: plan.rationale }
}

fn plan_schema() -> Schema {
    Schema::object([
        ("rationale", Schema::string()),
        (
            "tasks",
            Schema::array(Schema::object([
                ("id", Schema::string()),
                ("kind", Schema::string()),
                ("instructions", Schema::string()),
                ("depends_on", Schema::array(Schema::string())),
            ])),
        ),
    ])
}

/// The planner's request. Deterministic in (intent, catalog, bundle).
pub fn planner_request(intent: &IntentSpec, catalog: &NodeCatalog, bundle: &PromptBundle, cfg: &Config) -> ChatRequest {
    let profile = &cfg.backend_model;
    let system = bundle.render("planner/plan", &[("catalog", &catalog.describe())]);
    ChatRequest::new(&profile.provider, &profile.model, vec![Message::system(system), Message::user(intent.to_json())])
        .with_temperature(profile.temperature)
        .with_max_tokens(profile.max_tokens)
        .with_tag("planner")
}

fn parse_plan(v: Value) -> Result<Plan, String> {
    serde_json::from_value::<Plan>(v).map_err(|e| e.to_string())
}

pub fn make_plan(
    intent: &IntentSpec,
    catalog: &NodeCatalog,
    gateway: &Gateway,
    bundle: &PromptBundle,
    cfg: &Config,
) -> Result<Plan, PlanError> {
    let mut req = planner_request(intent, catalog, bundle, cfg);
    let attempts = cfg.generation.structured_attempts;
    let schema = plan_schema();
    let mut report = PlanReport::default();
    for round in 0..2 {
        let out = gateway
            .complete_checked(&req, &schema, attempts, parse_plan)
            .map_err(PlanError::StructuredOutputFailure)?;
        report = validate_plan(&out.value, catalog);
        if report.is_valid() {
            return Ok(normalize(out.value));
        }
        log::info!("plan rejected (round {}): {}", round + 1, report.to_string().trim_end());
        req.messages.push(Message::assistant(serde_json::to_string(&out.value).expect("serializable")));
        req.messages.push(Message::user(format!(
            "The plan is invalid:\n{report}Return a corrected plan that fixes every problem listed."
        )));
    }
    Err(PlanError::PlanInvalid(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use serde_json::json;
    use std::sync::Arc;

    fn task(id: &str, kind: &str, deps: &[&str]) -> Task {
        Task {
            id: id.into(),
            kind: kind.into(),
            instructions: format!("make {id}"),
            depends_on: deps.iter().map(|s| s.to_string()).collect(),
            produces: String::new(),
        }
    }

    fn four_task_plan() -> Plan {
        Plan {
            tasks: vec![
                task("t3", "Prompt", &["t1", "t2"]),
                task("t1", "TextFields", &[]),
                task("t2", "TextFields", &["t1"]),
                task("t4", "CodeEvaluator", &["t3"]),
            ],
            rationale: "r".into(),
        }
    }

    #[test]
    fn valid_plan_and_normalization() {
        let c = NodeCatalog::standard();
        let p = four_task_plan();
        assert!(validate_plan(&p, &c).is_valid());
        let n = normalize(p);
        let ids: Vec<_> = n.tasks.iter().map(|t| (t.id.as_str(), t.produces.as_str())).collect();
        assert_eq!(ids, vec![("t1", "node-1"), ("t2", "node-2"), ("t3", "node-3"), ("t4", "node-4")]);
    }

    #[test]
    fn rules() {
        let c = NodeCatalog::standard();
        let empty = Plan { tasks: vec![], rationale: String::new() };
        assert!(validate_plan(&empty, &c).has(PlanRule::EmptyPlan));

        let dup = Plan { tasks: vec![task("a", "Prompt", &[]), task("a", "TextFields", &[])], rationale: String::new() };
        assert!(validate_plan(&dup, &c).has(PlanRule::DuplicateId));

        let mut bad = four_task_plan();
        bad.tasks[0].kind = "Spreadsheet".into();
        bad.tasks[1].instructions = " ".into();
        bad.tasks[2].depends_on.push("zz".into());
        let r = validate_plan(&bad, &c);
        assert!(r.has(PlanRule::UnknownKind) && r.has(PlanRule::EmptyInstructions) && r.has(PlanRule::UnknownDependency));

        let vis = Plan { tasks: vec![task("v", "Vis", &[])], rationale: String::new() };
        assert!(validate_plan(&vis, &c).has(PlanRule::UnknownKind));

        let cyc = Plan { tasks: vec![task("a", "Prompt", &["b"]), task("b", "Prompt", &["a"])], rationale: String::new() };
        assert!(validate_plan(&cyc, &c).has(PlanRule::Cycle));
    }

    fn plan_json(p: &Plan) -> String {
        json!({
            "rationale": p.rationale,
            "tasks": p.tasks.iter().map(|t| json!({"id": t.id, "kind": t.kind, "instructions": t.instructions, "depends_on": t.depends_on})).collect::<Vec<_>>(),
        })
        .to_string()
    }

    #[test]
    fn invalid_twice_is_plan_invalid() {
        let mut bad = four_task_plan();
        bad.tasks[0].kind = "Spreadsheet".into();
        let g = Gateway::mock(Arc::new(MockBackend::queue([plan_json(&bad), plan_json(&bad)])));
        let err = make_plan(&IntentSpec::from_goal("g"), &NodeCatalog::standard(), &g, &PromptBundle::builtin(), &Config::default());
        match err {
            Err(PlanError::PlanInvalid(r)) => assert!(r.has(PlanRule::UnknownKind)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrective_retry_recovers() {
        let mut bad = four_task_plan();
        bad.tasks[1].depends_on = vec!["t4".into()];
        let mock = Arc::new(MockBackend::queue([plan_json(&bad), plan_json(&four_task_plan())]));
        let g = Gateway::mock(mock.clone());
        let plan = make_plan(&IntentSpec::from_goal("g"), &NodeCatalog::standard(), &g, &PromptBundle::builtin(), &Config::default()).unwrap();
        assert_eq!(plan.tasks.len(), 4);
        let second = &mock.received()[1];
        assert!(second.messages.last().unwrap().content.contains("cycle"));
    }

    #[test]
    fn planner_prompt_has_catalog_and_no_examples() {
        let c = NodeCatalog::standard();
        let intent = IntentSpec::from_goal("compare prompts");
        let req = planner_request(&intent, &c, &PromptBundle::builtin(), &Config::default());
        let system = &req.messages[0].content;
        for e in &c.entries {
            assert!(system.contains(e.display_name) && system.contains(e.description));
        }
        let lower = system.to_lowercase();
        for m in FEW_SHOT_MARKERS {
            assert!(!lower.contains(m), "marker {m:?} found");
        }
        assert_eq!(req.messages[1].content, intent.to_json());
    }
}
