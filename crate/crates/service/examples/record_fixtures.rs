//! Regenerates the bundled fixtures under `fixtures/`.
//!
//! A scripted backend stands in for the model providers; the gateway runs in
//! record mode, so every request the pipeline makes lands in the fixture's
//! cassette and later replays byte for byte.
//!
//!     cargo run -p flowsmith --example record_fixtures -- fixtures

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Result;
use chrono::{TimeZone, Utc};
use serde_json::{json, Value};

use flowsmith::engine::{Engine, CASSETTE_FILE};
use flowsmith_core::assembler::layout;
use flowsmith_core::clock::Clock;
use flowsmith_core::config::Config;
use flowsmith_core::flow::{parse_template, serialize, CodeEvaluatorPayload, Edge, Flow, ModelRef, Node, NodePayload, Provenance};
use flowsmith_core::gateway::{BackendError, Cassette, ChatRequest, Role, Gateway, GatewayOptions, MockBackend};
use flowsmith_core::intent::{advance, finalize, ConversationState, FormAnswer, TurnInput};

const PERSONA_GOAL: &str = "I want to see how giving a model different personas changes how it answers a hard math \
question, like the Gaussian integral, across four models: openai/gpt-4o, anthropic/claude-3-5-sonnet, \
google/gemini-1.5-pro and meta/llama-3-70b. Check whether each answer contains the correct result.";
const EMAIL_GOAL: &str = "You are a software engineer tasked with designing an automated tool to help people \
professionalize their emails for work contexts. Set up a flow that helps find the best prompt and compare prompts.";
const TWEET_GOAL: &str = "You are working on a tool to help summarize long text paragraphs into concise, catchy \
tweets limited to 144 characters. Set up a flow that helps find the best prompt and compare prompts.";
const SESSION_MESSAGE: &str = "I need to compare prompts for turning casual emails into professional ones.";
const SESSION_ANSWER: &str = "Judge each rewrite on whether it sounds professional.";

const PERSONA_MODELS: [&str; 4] =
    ["openai/gpt-4o", "anthropic/claude-3-5-sonnet", "google/gemini-1.5-pro", "meta/llama-3-70b"];

fn user(req: &ChatRequest) -> &str {
    &req.messages.last().expect("request has messages").content
}

fn instructions(req: &ChatRequest) -> &str {
    let u = req.messages.iter().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
    let rest = u.strip_prefix("Task instructions:\n").unwrap_or(u);
    rest.split("\n\n").next().unwrap_or_default()
}

fn topic(text: &str) -> &'static str {
    let t = text.to_lowercase();
    if t.contains("persona") {
        "persona"
    } else if t.contains("tweet") {
        "tweet"
    } else if t.contains("email") {
        "email"
    } else {
        "unknown"
    }
}

fn extract(text: &str) -> Value {
    if text.starts_with("Q: ") {
        return json!({"goal": null, "new_requirements": ["Grade each rewrite for professional tone"], "preferences": []});
    }
    match topic(text) {
        "persona" => json!({
            "goal": "Compare how personas change model answers to the Gaussian integral",
            "new_requirements": ["Query four models", "Check answers for the correct result"],
            "preferences": [{"key": "models", "value": PERSONA_MODELS.join(", ")}],
        }),
        "tweet" => json!({
            "goal": "Compare prompts that summarize long paragraphs into tweets",
            "new_requirements": ["Tweets are at most 144 characters", "Compare at least two prompts"],
            "preferences": [],
        }),
        _ => json!({
            "goal": "Compare prompts that professionalize work emails",
            "new_requirements": ["Compare at least two prompts"],
            "preferences": [],
        }),
    }
}

fn questions() -> Value {
    json!({
        "message": "Thanks, a few questions so the flow fits what you need.",
        "questions": [
            {"kind": "requirements_exploration", "text": "How should a rewrite be judged?"},
            {"kind": "requirements_exploration", "text": "Which models do you want to compare?"},
            {"kind": "goal_clarification", "text": "Who will read the rewritten emails?"},
        ],
    })
}

fn plan(intent: &str) -> Value {
    match topic(intent) {
        "persona" => json!({
            "rationale": "Vary the persona in a fixed math question and check each answer for the known result.",
            "tasks": [
                {"id": "t1", "kind": "TextFields", "instructions": "Several different personas the model should adopt.", "depends_on": []},
                {"id": "t2", "kind": "TextFields", "instructions": "One hard math question about the Gaussian integral.", "depends_on": []},
                {"id": "t3", "kind": "Prompt", "instructions": "Ask the math question while the model adopts each persona.", "depends_on": ["t1", "t2"]},
                {"id": "t4", "kind": "CodeEvaluator", "instructions": "Check whether the answer contains the result sqrt(pi).", "depends_on": ["t3"]},
            ],
        }),
        "tweet" => json!({
            "rationale": "Feed long paragraphs through alternative summarization prompts and check tweet length.",
            "tasks": [
                {"id": "t1", "kind": "TextFields", "instructions": "Several long text paragraphs to summarize.", "depends_on": []},
                {"id": "t2", "kind": "TextFields", "instructions": "Alternative prompt templates that summarize a paragraph into a tweet.", "depends_on": ["t1"]},
                {"id": "t3", "kind": "Prompt", "instructions": "Send each tweet prompt to the models.", "depends_on": ["t2"]},
                {"id": "t4", "kind": "CodeEvaluator", "instructions": "Check that the tweet is at most 144 characters.", "depends_on": ["t3"]},
            ],
        }),
        _ => json!({
            "rationale": "Feed informal emails through alternative rewriting prompts and grade the tone.",
            "tasks": [
                {"id": "t1", "kind": "TextFields", "instructions": "Several informal work emails to rewrite.", "depends_on": []},
                {"id": "t2", "kind": "TextFields", "instructions": "Alternative prompt templates that professionalize an email.", "depends_on": ["t1"]},
                {"id": "t3", "kind": "Prompt", "instructions": "Send each rewriting prompt to the models.", "depends_on": ["t2"]},
                {"id": "t4", "kind": "LLMScorer", "instructions": "Judge whether the rewritten email is professional.", "depends_on": ["t3"]},
            ],
        }),
    }
}

fn node(instr: &str) -> Option<Value> {
    Some(match instr {
        "Several different personas the model should adopt." => json!({
            "title": "persona",
            "fields": ["a pirate", "a kindergarten teacher", "a tenured mathematics professor"],
        }),
        "One hard math question about the Gaussian integral." => json!({
            "title": "question",
            "fields": ["What is the value of the Gaussian integral, the integral of e^(-x^2) over the whole real line?"],
        }),
        "Ask the math question while the model adopts each persona." => json!({
            "title": "Persona question",
            "template": "You are {persona}. Answer this question: {question}",
            "models": PERSONA_MODELS,
        }),
        "Check whether the answer contains the result sqrt(pi)." => json!({
            "title": "Contains sqrt(pi)",
            "program": "evaluate(r) = matches(r.text, '√π|\\\\sqrt{\\\\pi}')",
        }),
        "Several long text paragraphs to summarize." => json!({
            "title": "paragraph",
            "fields": [
                "The city council voted on Tuesday to convert three downtown parking lots into public parks. Supporters said the change would cool the streets during summer heat waves and give residents more places to gather, while opponents worried about losing parking for small businesses. Construction is expected to begin next spring and finish within two years.",
                "Researchers have found that honeybees can learn to associate colors with rewards after only a few trials. In the experiment, bees were trained to visit blue flowers containing sugar water and later preferred blue even when the reward was removed. The team believes the finding could help explain how pollinators choose between competing plants.",
                "A small bakery in the old town has started delivering bread by bicycle. The owner says the idea began as a way to save money on fuel, but customers now ask for the bike deliveries by name. The bakery plans to hire two more riders before the holidays.",
            ],
        }),
        "Alternative prompt templates that summarize a paragraph into a tweet." => json!({
            "title": "prompt",
            "fields": [
                "Summarize the following paragraph as a catchy tweet of at most 144 characters:\n\n{paragraph}",
                "You are a social media editor. Turn this text into a short, engaging tweet under 144 characters:\n\n{paragraph}",
            ],
        }),
        "Send each tweet prompt to the models." | "Send each rewriting prompt to the models." => json!({
            "title": "Candidate prompts",
            "template": "{prompt}",
            "models": [],
        }),
        "Check that the tweet is at most 144 characters." => json!({
            "title": "Tweet length",
            "program": "evaluate(r) = len(r.text) <= 144",
        }),
        "Several informal work emails to rewrite." => json!({
            "title": "email",
            "fields": [
                "hey, cant make the 3pm, something came up. can we move it??",
                "the report is late AGAIN. need it by friday or we're in trouble",
                "thx for covering for me yesterday, owe u one",
            ],
        }),
        "Alternative prompt templates that professionalize an email." => json!({
            "title": "prompt",
            "fields": [
                "Rewrite the following email so that it is professional and polite:\n\n{email}",
                "You are an executive assistant. Rewrite this email for a work context, keeping its meaning:\n\n{email}",
            ],
        }),
        "Judge whether the rewritten email is professional." => json!({
            "title": "Professional tone",
            "rubric_prompt": "Does the following email read as professional and suitable for a workplace? Answer with a boolean score.\n\n{response}",
            "score_type": "boolean",
            "labels": [],
        }),
        _ => return None,
    })
}

fn response(req: &ChatRequest) -> String {
    let text = user(req);
    let persona = ["pirate", "kindergarten", "professor"].iter().position(|p| text.contains(p));
    match (req.model.as_str(), persona) {
        ("gpt-4o", Some(_)) => "The Gaussian integral equals √π.".into(),
        ("claude-3-5-sonnet", Some(0)) => "Arr, the integral of e^(-x^2) be √π, matey.".into(),
        ("claude-3-5-sonnet", Some(_)) => "The integral evaluates to √π, about 1.772.".into(),
        ("gemini-1.5-pro", Some(2)) => "By polar coordinates the value is \\sqrt{\\pi}.".into(),
        ("gemini-1.5-pro", Some(_)) => "It is a famous integral with a value near 1.77.".into(),
        (_, Some(_)) => "The answer is roughly 1.77.".into(),
        (_, None) if text.contains("email") => {
            "Dear team, I am unable to attend the 3 pm meeting. Could we reschedule? Best regards.".into()
        }
        (_, None) => "Three downtown lots become parks next spring, cooler streets and more places to meet. #citylife".into(),
    }
}

fn scripted() -> MockBackend {
    MockBackend::responder(|req| {
        let tag = req.tag.as_deref().unwrap_or_default();
        let reply = match tag {
            "intent.extract" => extract(user(req)),
            "intent.questions" => questions(),
            "planner" => plan(user(req)),
            "review" => json!({"pass": true, "issues": [], "suggestion": null}),
            "executor.judge" => json!({"score": user(req).contains("Dear")}),
            "executor.prompt" => return Ok(response(req)),
            t if t.starts_with("nodegen.") => node(instructions(req))
                .ok_or_else(|| BackendError::Fatal(format!("no scripted node for {:?}", instructions(req))))?,
            other => return Err(BackendError::Fatal(format!("no script for tag {other}"))),
        };
        Ok(reply.to_string())
    })
}

fn recorder(dir: &Path, cfg: Config) -> Result<Engine> {
    let at = Utc.with_ymd_and_hms(2024, 9, 1, 12, 0, 0).unwrap();
    let file = dir.join(CASSETTE_FILE);
    if file.exists() {
        fs::remove_file(&file)?;
    }
    let cassette = Arc::new(Cassette::open_for_recording(file)?);
    let opts = GatewayOptions { clock: Clock::Fixed(at), ..GatewayOptions::default() };
    let gateway = Gateway::record(Arc::new(scripted()), cassette, opts);
    let mut engine = Engine::new(cfg, gateway, Clock::Fixed(at))?;
    engine.parallelism = flowsmith_core::Parallelism::Sequential;
    Ok(engine)
}

fn fixture_config(dir: &Path) -> Result<Config> {
    let text = "\
[generation]
reviewer = true
max_review_loops = 1
";
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(Config::from_toml(text)?)
}

fn write_flow(path: PathBuf, flow: &Flow) -> Result<()> {
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(&path, serialize(flow))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn headless(root: &Path, name: &str, goal: &str, run: bool) -> Result<Flow> {
    let dir = root.join(name);
    let engine = recorder(&dir, fixture_config(&dir)?)?;
    fs::write(dir.join("goal.txt"), goal)?;
    let out = engine.generate(goal, &|_| {})?;
    let flow = out.assembly.flow;
    if run {
        let result = engine.run(&flow, &engine.run_options())?;
        println!("{name}: run recorded, {} responses", result.response_count());
    }
    write_flow(root.join("flows").join(format!("{name}.flow.json")), &flow)?;
    Ok(flow)
}

fn session(root: &Path) -> Result<()> {
    let dir = root.join("session");
    let engine = recorder(&dir, fixture_config(&dir)?)?;
    let state = ConversationState::new("recording");
    let (state, turn) = advance(&state, TurnInput::Message(SESSION_MESSAGE.into()), &engine.gateway, &engine.bundle, &engine.cfg)?;
    let first = &turn.form.as_ref().expect("scripted form").questions[0];
    let answers = vec![FormAnswer { question_id: first.id.clone(), answer: Some(SESSION_ANSWER.into()) }];
    let (state, _) = advance(&state, TurnInput::Form(answers.clone()), &engine.gateway, &engine.bundle, &engine.cfg)?;
    let out = engine.assemble(finalize(&state)?, &|_| {})?;
    engine.run(&out.assembly.flow, &engine.run_options())?;
    let script = json!({"message": SESSION_MESSAGE, "answers": answers});
    fs::create_dir_all(root.join("scripts"))?;
    fs::write(root.join("scripts/session.json"), serde_json::to_string_pretty(&script)? + "\n")?;
    Ok(())
}

fn t(s: &str) -> flowsmith_core::flow::TemplateString {
    parse_template(s).expect("fixture template parses")
}

fn corpus_flow(id: &str, nodes: Vec<Node>, edges: Vec<Edge>) -> Flow {
    layout(Flow::new(id, id, nodes, edges, chrono::DateTime::UNIX_EPOCH, Provenance::Manual))
}

fn models() -> Vec<ModelRef> {
    vec![ModelRef::parse_label("openai/gpt-4o", "openai").unwrap(), ModelRef::parse_label("anthropic/claude-3-5-sonnet", "openai").unwrap()]
}

fn evaluator(id: &str, program: &str) -> Node {
    Node::new(id, "Check", NodePayload::CodeEvaluator(CodeEvaluatorPayload { language: "expr".into(), program: program.into() }))
}

fn corpus(root: &Path, email: &Flow, tweet: &Flow, persona: &Flow) -> Result<()> {
    let dir = root.join("corpus");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let translate = corpus_flow(
        "corpus-translate",
        vec![
            Node::text_fields("node-1", "sentence", vec![t("The meeting moved to Thursday."), t("Please bring your badge.")]),
            Node::text_fields(
                "node-2",
                "prompt",
                vec![t("Translate into French: {sentence}"), t("You are a professional translator. Render this in French: {sentence}")],
            ),
            Node::prompt("node-3", "Translate", t("{prompt}"), models()),
            evaluator("node-4", "evaluate(r) = len(r.text) > 0"),
        ],
        vec![
            Edge::new("node-1", "fields", "node-2", "sentence"),
            Edge::new("node-2", "fields", "node-3", "prompt"),
            Edge::new("node-3", "responses", "node-4", "responses"),
        ],
    );
    let single = corpus_flow(
        "corpus-single-template",
        vec![
            Node::text_fields("node-1", "email", vec![t("hey can we talk tmrw"), t("need the file asap")]),
            Node::prompt("node-2", "Rewrite", t("Rewrite this email professionally: {email}"), models()),
        ],
        vec![Edge::new("node-1", "fields", "node-2", "email")],
    );
    let unbound = corpus_flow(
        "corpus-unbound-variable",
        vec![
            Node::text_fields("node-1", "text", vec![t("A long paragraph.")]),
            Node::prompt("node-2", "Summarize", t("Summarize {paragraph} as a tweet"), models()),
        ],
        vec![],
    );
    let docs = [
        ("01-email", email),
        ("02-tweet", tweet),
        ("03-translate", &translate),
        ("04-single-template", &single),
        ("05-persona", persona),
        ("06-unbound-variable", &unbound),
    ];
    for (name, flow) in docs {
        write_flow(dir.join(format!("{name}.flow.json")), flow)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::init();
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let persona = headless(&root, "persona", PERSONA_GOAL, true)?;
    let email = headless(&root, "email", EMAIL_GOAL, false)?;
    let tweet = headless(&root, "tweet", TWEET_GOAL, false)?;
    session(&root)?;
    corpus(&root, &email, &tweet, &persona)?;
    Ok(())
}
