mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use common::{tree_spec, TreeSpec};
use flowsmith_core::executor::{expand, run_flow, EvaluatorRunner, RunOptions, RunStatus};
use flowsmith_core::flow::{validate, CodeEvaluatorPayload, Edge, Flow, Node, NodeCatalog, NodePayload};
use flowsmith_core::gateway::{Gateway, MockBackend};
use flowsmith_core::Parallelism;

fn mock() -> Gateway {
    Gateway::mock(Arc::new(MockBackend::responder(|r| Ok(format!("{} says {}", r.model, r.messages[0].content.len())))))
}

fn opts(parallelism: Parallelism) -> RunOptions {
    RunOptions { parallelism, ..RunOptions::default() }
}

fn with_evaluator(spec: &TreeSpec, program: &str) -> Flow {
    let f = spec.flow();
    let mut nodes = f.nodes().to_vec();
    let mut edges = f.edges().to_vec();
    nodes.push(Node::new(
        "z-eval",
        "eval",
        NodePayload::CodeEvaluator(CodeEvaluatorPayload { language: "expr".into(), program: program.into() }),
    ));
    edges.push(Edge::new("p", "responses", "z-eval", "responses"));
    f.with_nodes(nodes).with_edges(edges)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn expand_matches_brute_force(spec in tree_spec()) {
        let flow = spec.flow();
        prop_assert!(validate(&flow, &NodeCatalog::standard()).is_valid());
        let prompt = flow.node("p").unwrap();
        let instances = expand(&flow, prompt).unwrap();
        let oracle = spec.enumerate();
        prop_assert_eq!(instances.len(), oracle.len() * spec.models);

        let mut got: Vec<String> = instances.iter().map(|i| i.final_text.clone()).collect();
        let mut want: Vec<String> = oracle.iter().flat_map(|t| std::iter::repeat_n(t.clone(), spec.models)).collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);

        let result = run_flow(&flow, &NodeCatalog::standard(), &mock(), &EvaluatorRunner::default(), &opts(Parallelism::Sequential)).unwrap();
        prop_assert_eq!(&result.status, &RunStatus::Succeeded);
        prop_assert_eq!(result.response_count(), instances.len() * spec.samples as usize);
    }

    #[test]
    fn parallel_run_equals_sequential(spec in tree_spec()) {
        let flow = with_evaluator(&spec, "evaluate(r) = len(r.text) > 10");
        let run = |p| run_flow(&flow, &NodeCatalog::standard(), &mock(), &EvaluatorRunner::default(), &opts(p)).unwrap().without_timestamps();
        prop_assert_eq!(run(Parallelism::Sequential), run(Parallelism::Parallel));
    }

    #[test]
    fn results_are_closed_under_ancestors(spec in tree_spec(), fail in any::<bool>()) {
        let program = if fail { "evaluate(r) = r.text" } else { "evaluate(r) = true" };
        let flow = with_evaluator(&spec, program);
        let result = run_flow(&flow, &NodeCatalog::standard(), &mock(), &EvaluatorRunner::default(), &opts(Parallelism::Sequential)).unwrap();
        let done: BTreeSet<&String> = result.nodes.keys().collect();
        for id in &done {
            for a in flow.ancestors(id) {
                prop_assert!(done.contains(&a), "{} completed before its ancestor {}", id, a);
            }
        }
        match &result.status {
            RunStatus::Failed { node, .. } => {
                prop_assert!(fail);
                prop_assert_eq!(node.as_str(), "z-eval");
                prop_assert!(!done.contains(&node));
                prop_assert!(done.contains(&"p".to_string()));
            }
            RunStatus::Succeeded => {
                prop_assert!(!fail);
                prop_assert_eq!(done.len(), flow.nodes().len());
            }
            RunStatus::Running => prop_assert!(false, "finished run reports running"),
        }
    }
}

#[test]
fn mock_runs_are_deterministic() {
    let spec = TreeSpec { parents: vec![None, Some(0), None], masks: vec![vec![true, false], vec![true, true, false], vec![false]], models: 2, samples: 2 };
    let flow = with_evaluator(&spec, "evaluate(r) = len(r.text)");
    let run = || run_flow(&flow, &NodeCatalog::standard(), &mock(), &EvaluatorRunner::default(), &RunOptions::default()).unwrap();
    assert_eq!(run().without_timestamps(), run().without_timestamps());
}
