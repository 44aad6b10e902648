//! Replays the bundled cassettes through the core pipeline.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use flowsmith_core::assembler::{Assembly, Pipeline};
use flowsmith_core::clock::Clock;
use flowsmith_core::config::Config;
use flowsmith_core::executor::{run_flow, EvaluatorRunner, RunOptions};
use flowsmith_core::flow::{serialize, validate, NodeCatalog};
use flowsmith_core::gateway::{Cassette, Gateway, Role};
use flowsmith_core::intent::zero_shot;
use flowsmith_core::prompts::PromptBundle;
use flowsmith_core::Parallelism;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

struct Replay {
    cassette: Arc<Cassette>,
    cfg: Config,
    clock: Clock,
}

fn open(name: &str) -> Replay {
    let dir = fixtures().join(name);
    let cassette = Arc::new(Cassette::load(&dir).unwrap());
    let clock = Clock::Fixed(cassette.latest_recording().unwrap());
    Replay { cassette, cfg: Config::load(&dir.join("config.toml")).unwrap(), clock }
}

fn generate(name: &str, parallelism: Parallelism) -> (Assembly, Gateway) {
    let r = open(name);
    let goal = fs::read_to_string(fixtures().join(name).join("goal.txt")).unwrap();
    let gateway = Gateway::replay(r.cassette.clone());
    let bundle = PromptBundle::builtin();
    let catalog = NodeCatalog::standard();
    let evaluators = EvaluatorRunner::default();
    let intent = zero_shot(&goal, &gateway, &bundle, &r.cfg).unwrap();
    let pipeline = Pipeline {
        gateway: &gateway,
        bundle: &bundle,
        cfg: &r.cfg,
        catalog: &catalog,
        evaluators: &evaluators,
        parallelism,
        clock: r.clock.clone(),
    };
    let assembly = pipeline.assemble(&intent, &|_| {}).unwrap();
    (assembly, gateway)
}

#[test]
fn replayed_generations_match_the_bundled_flows() {
    for name in ["persona", "email", "tweet"] {
        let (a, gateway) = generate(name, Parallelism::Sequential);
        let expected = fs::read(fixtures().join("flows").join(format!("{name}.flow.json"))).unwrap();
        assert_eq!(serialize(&a.flow), expected, "{name}");
        assert!(validate(&a.flow, &NodeCatalog::standard()).is_valid());
        assert_eq!(gateway.stats().network_calls, 0);
        assert_eq!(gateway.stats().calls, gateway.stats().replayed);
    }
}

#[test]
fn parallel_generation_equals_sequential() {
    for name in ["persona", "email", "tweet"] {
        let (seq, _) = generate(name, Parallelism::Sequential);
        let (par, _) = generate(name, Parallelism::Parallel);
        assert_eq!(serialize(&seq.flow), serialize(&par.flow), "{name}");
    }
}

#[test]
fn task_agents_receive_their_instructions_verbatim() {
    let r = open("tweet");
    let (a, _) = generate("tweet", Parallelism::Sequential);
    let users: Vec<String> = r
        .cassette
        .entries()
        .into_iter()
        .filter_map(|e| e.request.messages.into_iter().find(|m| m.role == Role::User).map(|m| m.content))
        .collect();
    for task in &a.plans[0].tasks {
        let prefix = format!("Task instructions:\n{}\n", task.instructions);
        let msg = users.iter().find(|u| u.starts_with(&prefix)).unwrap_or_else(|| panic!("no request for {}", task.id));
        for dep in &task.depends_on {
            let produced = &a.plans[0].task(dep).unwrap().produces;
            let node = a.flow.node(produced).unwrap();
            assert!(msg.contains(&serde_json::to_string_pretty(&node.payload).unwrap()) || msg.contains(&node.title));
        }
        assert!(!msg.contains("Find a prompt"), "transcript leaked into the task prompt");
    }
}

#[test]
fn persona_run_replays_deterministically() {
    let r = open("persona");
    let flow = flowsmith_core::flow::deserialize(&fs::read(fixtures().join("flows/persona.flow.json")).unwrap()).unwrap();
    let run = || {
        let g = Gateway::replay(r.cassette.clone());
        let out = run_flow(&flow, &NodeCatalog::standard(), &g, &EvaluatorRunner::default(), &RunOptions::default()).unwrap();
        assert_eq!(g.stats().network_calls, 0);
        out
    };
    let (a, b) = (run(), run());
    assert_eq!(a.response_count(), 12);
    assert_eq!(a.without_timestamps(), b.without_timestamps());
    assert_eq!(a.nodes["node-5"].rows().len(), 4);
}
