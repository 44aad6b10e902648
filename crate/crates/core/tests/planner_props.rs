use std::sync::Arc;

use proptest::prelude::*;
use serde_json::json;

use flowsmith_core::config::Config;
use flowsmith_core::flow::NodeCatalog;
use flowsmith_core::gateway::{request_key, Gateway, MockBackend};
use flowsmith_core::intent::IntentSpec;
use flowsmith_core::planner::{make_plan, planner_request, validate_plan};
use flowsmith_core::prompts::PromptBundle;

fn raw_plan() -> impl Strategy<Value = serde_json::Value> {
    let kind = prop_oneof!["TextFields", "Prompt", "CodeEvaluator", "LLMScorer", "Vis", "Bogus"];
    let task = (kind, "[a-z ]{0,12}", proptest::collection::vec(0usize..6, 0..3));
    proptest::collection::vec(task, 0..6).prop_map(|tasks| {
        let tasks: Vec<_> = tasks
            .into_iter()
            .enumerate()
            .map(|(i, (kind, instr, deps))| {
                json!({"id": format!("t{i}"), "kind": kind, "instructions": instr, "depends_on": deps.iter().map(|d| format!("t{d}")).collect::<Vec<_>>()})
            })
            .collect();
        json!({"rationale": "r", "tasks": tasks})
    })
}

proptest! {
    #[test]
    fn returned_plans_validate(first in raw_plan(), second in raw_plan()) {
        let g = Gateway::mock(Arc::new(MockBackend::queue([first.to_string(), second.to_string()])));
        let catalog = NodeCatalog::standard();
        let intent = IntentSpec::from_goal("compare prompts");
        if let Ok(plan) = make_plan(&intent, &catalog, &g, &PromptBundle::builtin(), &Config::default()) {
            prop_assert!(validate_plan(&plan, &catalog).is_valid());
        }
    }

    #[test]
    fn planner_prompt_is_deterministic(goal in "[a-z ]{1,40}") {
        let intent = IntentSpec::from_goal(&goal);
        let make = || planner_request(&intent, &NodeCatalog::standard(), &PromptBundle::builtin(), &Config::default());
        prop_assert_eq!(request_key(&make()), request_key(&make()));
    }
}
