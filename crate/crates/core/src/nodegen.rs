//! Task agents: one structured model call per planned task, each producing a
//! fully populated node.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::{json, Value};
use thiserror::Error;

use crate::config::Config;
use crate::executor::EvaluatorRunner;
use crate::flow::{
    parse_template, CodeEvaluatorPayload, LlmScorerPayload, ModelRef, Node, NodeKind, NodePayload, PromptPayload,
    ScoreSchema, TemplateString, TextFieldsPayload, RESPONSE_PLACEHOLDER,
};
use crate::gateway::{extract_json, ChatRequest, Gateway, Message, Schema, StructuredError};
use crate::intent::IntentSpec;
use crate::planner::{Plan, Task};
use crate::prompts::PromptBundle;
use crate::Parallelism;

/// Shared inputs of a task agent. `completed` holds the nodes of the task's
/// dependencies, keyed by task id.
#[derive(Debug, Clone, Copy)]
pub struct GenContext<'a> {
    pub intent: &'a IntentSpec,
    pub plan: &'a Plan,
    pub completed: &'a BTreeMap<String, Node>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("the agent for task {task} did not return a usable node")]
    StructuredOutputFailure {
        task: String,
        #[source]
        source: StructuredError,
    },
    #[error("task {task}: template uses {variables:?}, which no input node supplies")]
    UnsatisfiableTemplate { task: String, variables: Vec<String> },
    #[error("task {task}: evaluator program rejected: {reason}")]
    EvaluatorRejected { task: String, reason: String },
    #[error("task {task}: kind {kind} has no agent")]
    NoAgent { task: String, kind: String },
}

pub struct Agents<'a> {
    pub gateway: &'a Gateway,
    pub bundle: &'a PromptBundle,
    pub cfg: &'a Config,
    pub evaluators: &'a EvaluatorRunner,
}

/// Semantic check failures, kept apart so the final error can say which
/// rule the model kept breaking.
enum Reject {
    Shape(String),
    Unbound(Vec<String>),
    Program(String),
}

impl Reject {
    fn message(&self) -> String {
        match self {
            Reject::Shape(m) => m.clone(),
            Reject::Unbound(vars) => format!(
                "the template uses variables no input node provides: {}. Use only the allowed variable names, or write literal braces as \\{{ and \\}}.",
                vars.join(", ")
            ),
            Reject::Program(m) => format!("the program does not pass the syntax check: {m}"),
        }
    }
}

fn as_identifier(s: &str) -> String {
    let mut out = String::new();
    for c in s.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_owned()
}

fn wants_variation(instructions: &str) -> bool {
    let l = instructions.to_lowercase();
    ["variation", "alternative", "different", "several", "multiple", "various", "vary", "compare"]
        .iter()
        .any(|k| l.contains(k))
}

fn model_preference(intent: &IntentSpec) -> Option<&str> {
    intent
        .preferences
        .iter()
        .find(|(k, _)| k.contains("model") && k.as_str() != "judge_model")
        .map(|(_, v)| v.as_str())
}

impl Agents<'_> {
    fn user_message(&self, task: &Task, ctx: &GenContext) -> String {
        let deps: Vec<Value> = task
            .depends_on
            .iter()
            .filter_map(|d| ctx.completed.get(d))
            .map(|n| json!({"id": n.id, "kind": n.kind, "title": n.title, "payload": n.payload}))
            .collect();
        let allowed = self.allowed_variables(task, ctx, NodeKind::TextFields);
        format!(
            "Task instructions:\n{}\n\nDependency nodes:\n```json\n{}\n```\n\nAllowed template variables: {}\n\nUser preferences:\n```json\n{}\n```\n",
            task.instructions,
            serde_json::to_string_pretty(&deps).expect("serializable"),
            if allowed.is_empty() { "none".to_owned() } else { allowed.iter().cloned().collect::<Vec<_>>().join(", ") },
            serde_json::to_string_pretty(&ctx.intent.preferences).expect("serializable"),
        )
    }

    /// Titles of dependency nodes of the given kind: the variable names
    /// those nodes can feed.
    fn allowed_variables(&self, task: &Task, ctx: &GenContext, kind: NodeKind) -> BTreeSet<String> {
        task.depends_on
            .iter()
            .filter_map(|d| ctx.completed.get(d))
            .filter(|n| n.kind == kind)
            .map(|n| n.title.clone())
            .collect()
    }

    fn request(&self, task: &Task, ctx: &GenContext, kind: NodeKind) -> ChatRequest {
        let p = &self.cfg.backend_model;
        ChatRequest::new(
            &p.provider,
            &p.model,
            vec![
                Message::system(self.bundle.raw(&format!("nodegen/{}", kind.as_str())).to_owned()),
                Message::user(self.user_message(task, ctx)),
            ],
        )
        .with_temperature(p.temperature)
        .with_max_tokens(p.max_tokens)
        .with_tag(format!("nodegen.{}", kind.as_str()))
    }

    /// Structured call plus semantic check, with the configured corrective
    /// budget. Maps a final failure to the most specific error.
    fn call<T>(
        &self,
        task: &Task,
        req: &ChatRequest,
        schema: &Schema,
        check: impl Fn(&Value) -> Result<T, Reject>,
    ) -> Result<T, GenError> {
        let attempts = self.cfg.generation.structured_attempts;
        match self.gateway.complete_checked(req, schema, attempts, |v| check(&v).map_err(|r| r.message())) {
            Ok(s) => Ok(s.value),
            Err(StructuredError::Failure { raw_attempts, last_error }) => {
                let last = raw_attempts
                    .last()
                    .and_then(|raw| extract_json(raw).ok())
                    .filter(|v| schema.validate(v).is_ok())
                    .and_then(|v| check(&v).err());
                Err(match last {
                    Some(Reject::Unbound(variables)) => GenError::UnsatisfiableTemplate { task: task.id.clone(), variables },
                    Some(Reject::Program(reason)) => GenError::EvaluatorRejected { task: task.id.clone(), reason },
                    _ => GenError::StructuredOutputFailure {
                        task: task.id.clone(),
                        source: StructuredError::Failure { raw_attempts, last_error },
                    },
                })
            }
            Err(source) => Err(GenError::StructuredOutputFailure { task: task.id.clone(), source }),
        }
    }

    pub fn generate(&self, task: &Task, ctx: &GenContext) -> Result<Node, GenError> {
        match task.node_kind() {
            Some(NodeKind::TextFields) => self.gen_textfields(task, ctx),
            Some(NodeKind::Prompt) => self.gen_prompt(task, ctx),
            Some(NodeKind::CodeEvaluator) => self.gen_code_evaluator(task, ctx),
            Some(NodeKind::LLMScorer) => self.gen_llm_scorer(task, ctx),
            _ => Err(GenError::NoAgent { task: task.id.clone(), kind: task.kind.clone() }),
        }
    }

    pub fn gen_textfields(&self, task: &Task, ctx: &GenContext) -> Result<Node, GenError> {
        let schema = Schema::object([("title", Schema::string()), ("fields", Schema::array(Schema::string()))]);
        let allowed = self.allowed_variables(task, ctx, NodeKind::TextFields);
        let need_two = wants_variation(&task.instructions);
        let (title, fields) = self.call(task, &self.request(task, ctx, NodeKind::TextFields), &schema, |v| {
            let title = as_identifier(v["title"].as_str().unwrap_or_default());
            if title.is_empty() {
                return Err(Reject::Shape("title must be a non-empty identifier".into()));
            }
            let mut fields: Vec<TemplateString> = Vec::new();
            for f in v["fields"].as_array().into_iter().flatten().filter_map(Value::as_str) {
                if f.trim().is_empty() {
                    continue;
                }
                let t = parse_template(f.trim()).map_err(|e| Reject::Shape(format!("field {f:?}: {e}")))?;
                if !fields.contains(&t) {
                    fields.push(t);
                }
            }
            if fields.is_empty() {
                return Err(Reject::Shape("fields must contain at least one non-empty value".into()));
            }
            if need_two && fields.len() < 2 {
                return Err(Reject::Shape("the task asks for variation: provide at least two distinct values".into()));
            }
            unbound(fields.iter().flat_map(|f| f.variables()), &allowed)?;
            Ok((title, fields))
        })?;
        Ok(Node::new(&task.produces, title, NodePayload::TextFields(TextFieldsPayload { fields })))
    }

    pub fn gen_prompt(&self, task: &Task, ctx: &GenContext) -> Result<Node, GenError> {
        let schema = Schema::object([
            ("title", Schema::string()),
            ("template", Schema::string()),
            ("models", Schema::array(Schema::string())),
        ]);
        let allowed = self.allowed_variables(task, ctx, NodeKind::TextFields);
        let (title, template, suggested) = self.call(task, &self.request(task, ctx, NodeKind::Prompt), &schema, |v| {
            let template = parse_template(v["template"].as_str().unwrap_or_default().trim())
                .map_err(|e| Reject::Shape(format!("template: {e}")))?;
            if template.raw().is_empty() {
                return Err(Reject::Shape("template must not be empty".into()));
            }
            unbound(template.variables().iter(), &allowed)?;
            let models: Vec<String> =
                v["models"].as_array().into_iter().flatten().filter_map(Value::as_str).map(str::to_owned).collect();
            Ok((v["title"].as_str().unwrap_or_default().trim().to_owned(), template, models))
        })?;
        let models = self.choose_models(ctx.intent, &suggested);
        let title = if title.is_empty() { "Prompt".to_owned() } else { title };
        Ok(Node::new(
            &task.produces,
            title,
            NodePayload::Prompt(PromptPayload {
                template,
                models,
                samples_per_prompt: self.cfg.generation.samples_per_prompt.max(1),
            }),
        ))
    }

    fn choose_models(&self, intent: &IntentSpec, suggested: &[String]) -> Vec<ModelRef> {
        let g = &self.cfg.generation;
        let fresh = |m: ModelRef| ModelRef { temperature: g.prompt_temperature, max_tokens: g.prompt_max_tokens, ..m };
        let mut out: Vec<ModelRef> = Vec::new();
        let push = |out: &mut Vec<ModelRef>, m: ModelRef| {
            if !out.iter().any(|x| x.label() == m.label()) {
                out.push(m);
            }
        };
        if model_preference(intent).is_some() {
            for label in suggested {
                if let Some(m) = ModelRef::parse_label(label, &self.cfg.backend_model.provider) {
                    push(&mut out, fresh(m));
                }
            }
        }
        if out.is_empty() {
            for m in self.cfg.default_models().into_iter().take(2) {
                push(&mut out, m);
            }
        }
        out
    }

    pub fn gen_code_evaluator(&self, task: &Task, ctx: &GenContext) -> Result<Node, GenError> {
        let schema = Schema::object([("title", Schema::string()), ("program", Schema::string())]);
        let language = self.cfg.generation.evaluator_language.clone();
        let (title, program) = self.call(task, &self.request(task, ctx, NodeKind::CodeEvaluator), &schema, |v| {
            let program = v["program"].as_str().unwrap_or_default().trim().to_owned();
            self.evaluators.check(&language, &program).map_err(|e| Reject::Program(e.to_string()))?;
            Ok((v["title"].as_str().unwrap_or_default().trim().to_owned(), program))
        })?;
        let title = if title.is_empty() { "Evaluator".to_owned() } else { title };
        Ok(Node::new(&task.produces, title, NodePayload::CodeEvaluator(CodeEvaluatorPayload { language, program })))
    }

    pub fn gen_llm_scorer(&self, task: &Task, ctx: &GenContext) -> Result<Node, GenError> {
        let schema = Schema::object([
            ("title", Schema::string()),
            ("rubric_prompt", Schema::string()),
            ("score_type", Schema::enumeration(["boolean", "number", "categorical"]).nullable()),
            ("labels", Schema::array(Schema::string())),
        ]);
        let mut allowed: BTreeSet<String> = task
            .depends_on
            .iter()
            .filter_map(|d| ctx.completed.get(d))
            .flat_map(|n| n.input_variables())
            .collect();
        allowed.insert(RESPONSE_PLACEHOLDER.to_owned());
        let (title, rubric, score_schema) = self.call(task, &self.request(task, ctx, NodeKind::LLMScorer), &schema, |v| {
            let rubric = parse_template(v["rubric_prompt"].as_str().unwrap_or_default().trim())
                .map_err(|e| Reject::Shape(format!("rubric_prompt: {e}")))?;
            if !rubric.contains_variable(RESPONSE_PLACEHOLDER) {
                return Err(Reject::Shape("rubric_prompt must contain the {response} placeholder".into()));
            }
            unbound(rubric.variables().iter(), &allowed)?;
            let labels: Vec<String> = v["labels"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(Value::as_str)
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect();
            let score = match v["score_type"].as_str() {
                None | Some("boolean") => ScoreSchema::Boolean,
                Some("number") => ScoreSchema::Number,
                Some(_) if labels.is_empty() => {
                    return Err(Reject::Shape("a categorical score needs at least one label".into()))
                }
                Some(_) => ScoreSchema::Categorical { labels },
            };
            Ok((v["title"].as_str().unwrap_or_default().trim().to_owned(), rubric, score))
        })?;
        let judge_model = ctx
            .intent
            .preferences
            .get("judge_model")
            .and_then(|l| ModelRef::parse_label(l, &self.cfg.backend_model.provider))
            .unwrap_or_else(|| self.cfg.backend_model.model_ref());
        let title = if title.is_empty() { "Scorer".to_owned() } else { title };
        Ok(Node::new(
            &task.produces,
            title,
            NodePayload::LlmScorer(LlmScorerPayload { rubric_prompt: rubric, judge_model, score_schema }),
        ))
    }

    /// Runs every task of the plan, in waves of tasks whose dependencies are
    /// done. `progress(done, total)` fires as each node completes.
    pub fn generate_all(
        &self,
        plan: &Plan,
        intent: &IntentSpec,
        parallelism: Parallelism,
        progress: &(dyn Fn(usize, usize) + Sync),
    ) -> Result<BTreeMap<String, Node>, GenError> {
        let total = plan.tasks.len();
        let finished = AtomicUsize::new(0);
        let mut done: BTreeMap<String, Node> = BTreeMap::new();
        while done.len() < total {
            let ready: Vec<&Task> = plan
                .tasks
                .iter()
                .filter(|t| !done.contains_key(&t.id) && t.depends_on.iter().all(|d| done.contains_key(d)))
                .collect();
            assert!(!ready.is_empty(), "plan was validated acyclic");
            let nodes = crate::par::try_map(parallelism, &ready, |task| {
                let completed: BTreeMap<String, Node> =
                    task.depends_on.iter().map(|d| (d.clone(), done[d].clone())).collect();
                let node = self.generate(task, &GenContext { intent, plan, completed: &completed })?;
                progress(finished.fetch_add(1, Ordering::SeqCst) + 1, total);
                Ok::<_, GenError>(node)
            })?;
            for (task, node) in ready.into_iter().zip(nodes) {
                done.insert(task.id.clone(), node);
            }
        }
        Ok(done)
    }
}

fn unbound<'a>(vars: impl Iterator<Item = &'a String>, allowed: &BTreeSet<String>) -> Result<(), Reject> {
    let mut missing: Vec<String> = vars.filter(|v| !allowed.contains(*v)).cloned().collect();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Reject::Unbound(missing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn task(id: &str, kind: &str, deps: &[&str], instructions: &str) -> Task {
        Task {
            id: id.into(),
            kind: kind.into(),
            instructions: instructions.into(),
            depends_on: deps.iter().map(|s| s.to_string()).collect(),
            produces: format!("node-{id}"),
        }
    }

    struct Fixture {
        cfg: Config,
        bundle: PromptBundle,
        runner: EvaluatorRunner,
        intent: IntentSpec,
        plan: Plan,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                cfg: Config::default(),
                bundle: PromptBundle::builtin(),
                runner: EvaluatorRunner::default(),
                intent: IntentSpec::from_goal("goal"),
                plan: Plan { tasks: vec![], rationale: String::new() },
            }
        }

        fn run(&self, replies: Vec<Value>, t: &Task, completed: &BTreeMap<String, Node>) -> (Result<Node, GenError>, Arc<MockBackend>) {
            let mock = Arc::new(MockBackend::queue(replies.into_iter().map(|v| v.to_string())));
            let g = Gateway::mock(mock.clone());
            let agents = Agents { gateway: &g, bundle: &self.bundle, cfg: &self.cfg, evaluators: &self.runner };
            let ctx = GenContext { intent: &self.intent, plan: &self.plan, completed };
            (agents.generate(t, &ctx), mock)
        }
    }

    fn tf(id: &str, title: &str, fields: &[&str]) -> Node {
        Node::text_fields(id, title, fields.iter().map(|f| parse_template(f).unwrap()).collect())
    }

    #[test]
    fn textfields_persona_values() {
        let f = Fixture::new();
        let t = task("t1", "TextFields", &[], "Several different personas");
        let (node, mock) = f.run(
            vec![json!({"title": "Persona", "fields": ["a pirate", "a poet", "a child", "a pirate"]})],
            &t,
            &BTreeMap::new(),
        );
        let node = node.unwrap();
        assert_eq!(node.title, "persona");
        assert_eq!(node.as_text_fields().unwrap().fields.len(), 3);
        let user = &mock.received()[0].messages[1].content;
        assert!(user.contains("Several different personas"));
    }

    #[test]
    fn textfields_empty_twice_fails() {
        let f = Fixture::new();
        let t = task("t1", "TextFields", &[], "inputs");
        let (r, _) = f.run(vec![json!({"title": "x", "fields": []}), json!({"title": "x", "fields": [""]})], &t, &BTreeMap::new());
        assert!(matches!(r, Err(GenError::StructuredOutputFailure { .. })));
    }

    #[test]
    fn textfields_templates_must_reference_dependencies() {
        let f = Fixture::new();
        let deps = BTreeMap::from([("t1".to_string(), tf("node-t1", "text", &["para"]))]);
        let t = task("t2", "TextFields", &["t1"], "prompt alternatives");
        let (r, _) = f.run(
            vec![
                json!({"title": "prompts", "fields": ["Summarize {txt}", "Condense {txt}"]}),
                json!({"title": "prompts", "fields": ["Summarize {text}", "Condense {text}"]}),
            ],
            &t,
            &deps,
        );
        let node = r.unwrap();
        assert!(node.as_text_fields().unwrap().fields.iter().all(|f| f.contains_variable("text")));
    }

    #[test]
    fn prompt_variables_and_default_models() {
        let f = Fixture::new();
        let deps = BTreeMap::from([
            ("a".to_string(), tf("node-a", "persona", &["x", "y"])),
            ("b".to_string(), tf("node-b", "question", &["q"])),
        ]);
        let t = task("p", "Prompt", &["a", "b"], "ask");
        let (r, _) = f.run(
            vec![json!({"title": "Ask", "template": "You are {persona}. {question}", "models": ["x/y", "z/w", "q/r"]})],
            &t,
            &deps,
        );
        let node = r.unwrap();
        let p = node.as_prompt().unwrap();
        assert_eq!(p.template.variables(), ["persona", "question"]);
        assert_eq!(p.models.iter().map(ModelRef::label).collect::<Vec<_>>(), vec!["openai/gpt-4o", "anthropic/claude-3-5-sonnet"]);
        assert_eq!(p.samples_per_prompt, 1);
    }

    #[test]
    fn prompt_model_preference_is_honored() {
        let mut f = Fixture::new();
        f.intent.preferences.insert("models".into(), "four LLMs".into());
        let t = task("p", "Prompt", &[], "ask");
        let (r, _) = f.run(
            vec![json!({"title": "Ask", "template": "hi", "models": ["openai/gpt-4o", "anthropic/claude-3-5-sonnet", "google/gemini-1.5-pro", "meta/llama-3-70b"]})],
            &t,
            &BTreeMap::new(),
        );
        assert_eq!(r.unwrap().as_prompt().unwrap().models.len(), 4);
    }

    #[test]
    fn prompt_unsatisfiable() {
        let f = Fixture::new();
        let t = task("p", "Prompt", &[], "ask");
        let bad = json!({"title": "Ask", "template": "{nope}", "models": []});
        let (r, mock) = f.run(vec![bad.clone(), bad], &t, &BTreeMap::new());
        assert_eq!(r, Err(GenError::UnsatisfiableTemplate { task: "p".into(), variables: vec!["nope".into()] }));
        assert_eq!(mock.received().len(), 2);
    }

    #[test]
    fn evaluator_checked_and_rejected() {
        let f = Fixture::new();
        let t = task("e", "CodeEvaluator", &[], "check √π");
        let (r, _) = f.run(vec![json!({"title": "has sqrt pi", "program": r"evaluate(r) = matches(r.text, '√π|sqrt\(pi\)')"})], &t, &BTreeMap::new());
        let node = r.unwrap();
        let NodePayload::CodeEvaluator(p) = &node.payload else { panic!() };
        assert_eq!(p.language, "expr");

        let bad = json!({"title": "x", "program": "def evaluate(r): return True"});
        let (r, _) = f.run(vec![bad.clone(), bad], &t, &BTreeMap::new());
        assert!(matches!(r, Err(GenError::EvaluatorRejected { .. })));
    }

    #[test]
    fn scorer_defaults() {
        let mut f = Fixture::new();
        let t = task("s", "LLMScorer", &[], "grade professionalism");
        let (r, _) = f.run(
            vec![
                json!({"title": "Pro", "rubric_prompt": "Is it professional?", "labels": []}),
                json!({"title": "Pro", "rubric_prompt": "Is this email professional? {response}", "score_type": null, "labels": []}),
            ],
            &t,
            &BTreeMap::new(),
        );
        let node = r.unwrap();
        let NodePayload::LlmScorer(p) = &node.payload else { panic!() };
        assert_eq!(p.score_schema, ScoreSchema::Boolean);
        assert_eq!(p.judge_model.label(), "openai/gpt-4o");

        f.intent.preferences.insert("judge_model".into(), "anthropic/claude-3-haiku".into());
        let (r, _) = f.run(
            vec![json!({"title": "Pro", "rubric_prompt": "{response}", "score_type": "number", "labels": []})],
            &t,
            &BTreeMap::new(),
        );
        let NodePayload::LlmScorer(p) = r.unwrap().payload else { panic!() };
        assert_eq!(p.judge_model.label(), "anthropic/claude-3-haiku");
        assert_eq!(p.score_schema, ScoreSchema::Number);
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let f = Fixture::new();
        let plan = Plan {
            tasks: vec![
                task("a", "TextFields", &[], "personas"),
                task("b", "TextFields", &[], "questions"),
                task("c", "Prompt", &["a", "b"], "ask"),
            ],
            rationale: String::new(),
        };
        let responder = || {
            Arc::new(MockBackend::responder(|req| {
                let user = &req.messages[1].content;
                Ok(if user.contains("personas") {
                    json!({"title": "persona", "fields": ["p1", "p2"]})
                } else if user.contains("questions") {
                    json!({"title": "question", "fields": ["q1"]})
                } else {
                    json!({"title": "ask", "template": "{persona} {question}", "models": []})
                }
                .to_string())
            }))
        };
        let mut outs = Vec::new();
        for mode in [Parallelism::Sequential, Parallelism::Parallel] {
            let g = Gateway::mock(responder());
            let agents = Agents { gateway: &g, bundle: &f.bundle, cfg: &f.cfg, evaluators: &f.runner };
            let seen = std::sync::Mutex::new(Vec::new());
            let nodes = agents.generate_all(&plan, &f.intent, mode, &|i, n| seen.lock().unwrap().push((i, n))).unwrap();
            let mut seen = seen.into_inner().unwrap();
            seen.sort();
            assert_eq!(seen, vec![(1, 3), (2, 3), (3, 3)]);
            outs.push(nodes);
        }
        assert_eq!(outs[0], outs[1]);
    }
}
