//! Requirements gathering: keeps the running context record for a chat
//! session, asks clarifying questions, and turns the session into an
//! [`IntentSpec`] for the planner.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::Config;
use crate::gateway::{canonical_json, sha256_hex, ChatRequest, Gateway, Message, Role, Schema};
use crate::prompts::PromptBundle;

pub const MAX_QUESTIONS: usize = 3;
pub const MAX_QUESTION_CHARS: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    GoalClarification,
    RequirementsExploration,
    Disambiguation,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] =
        [QuestionKind::GoalClarification, QuestionKind::RequirementsExploration, QuestionKind::Disambiguation];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::GoalClarification => "goal_clarification",
            QuestionKind::RequirementsExploration => "requirements_exploration",
            QuestionKind::Disambiguation => "disambiguation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub text: String,
    #[serde(default)]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionForm {
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentContext {
    pub goal: Option<String>,
    pub requirements: Vec<String>,
    pub preferences: BTreeMap<String, String>,
}

impl IntentContext {
    /// Appends a requirement unless an entry equal to it ignoring case
    /// already exists.
    pub fn add_requirement(&mut self, requirement: &str) -> bool {
        let r = requirement.trim();
        if r.is_empty() || self.requirements.iter().any(|x| x.to_lowercase() == r.to_lowercase()) {
            return false;
        }
        self.requirements.push(r.to_owned());
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    pub session_id: String,
    pub history: Vec<Message>,
    pub context: IntentContext,
    #[serde(default)]
    pub pending_form: Option<QuestionForm>,
    #[serde(default)]
    pub turns: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormAnswer {
    pub question_id: String,
    #[serde(default)]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnInput {
    Message(String),
    Form(Vec<FormAnswer>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantTurn {
    pub message: String,
    pub form: Option<QuestionForm>,
    pub coverage_hint: Coverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub goal: String,
    pub requirements: Vec<String>,
    pub preferences: BTreeMap<String, String>,
    pub transcript_digest: String,
}

impl IntentSpec {
    /// Zero-shot spec from a bare goal.
    pub fn from_goal(goal: &str) -> IntentSpec {
        let mut state = ConversationState::new("headless");
        state.history.push(Message::user(goal));
        finalize(&state).expect("one user message")
    }

    /// Content digest of the whole spec.
    pub fn digest(&self) -> String {
        sha256_hex(canonical_json(&serde_json::to_value(self).expect("serializable")).as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntentError {
    #[error("the assistant is unavailable right now ({0}); please try again")]
    AgentUnavailable(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("the conversation has no user message yet")]
    EmptyConversation,
}

impl ConversationState {
    pub fn new(session_id: impl Into<String>) -> Self {
        ConversationState {
            session_id: session_id.into(),
            history: Vec::new(),
            context: IntentContext::default(),
            pending_form: None,
            turns: 0,
        }
    }

    pub fn coverage(&self) -> Coverage {
        let c = &self.context;
        let filled = usize::from(c.goal.is_some())
            + usize::from(!c.requirements.is_empty())
            + usize::from(!c.preferences.is_empty());
        match filled {
            0 | 1 => Coverage::Low,
            2 => Coverage::Medium,
            _ => Coverage::High,
        }
    }
}

/// Cuts `text` to at most `max` characters at a word boundary, marking the
/// cut with an ellipsis.
pub fn truncate_words(text: &str, max: usize) -> String {
    let text = text.trim();
    if text.chars().count() <= max {
        return text.to_owned();
    }
    let budget: String = text.chars().take(max.saturating_sub(1)).collect();
    let cut = match budget.rfind(char::is_whitespace) {
        Some(i) if i > 0 => budget[..i].trim_end(),
        _ => budget.as_str(),
    };
    format!("{cut}…")
}

fn extract_schema() -> Schema {
    Schema::object([
        ("goal", Schema::string().nullable()),
        ("new_requirements", Schema::array(Schema::string())),
        ("preferences", Schema::array(Schema::object([("key", Schema::string()), ("value", Schema::string())]))),
    ])
}

fn questions_schema() -> Schema {
    Schema::object([
        ("message", Schema::string()),
        (
            "questions",
            Schema::array(Schema::object([
                ("kind", Schema::enumeration(QuestionKind::ALL.map(|k| k.as_str()))),
                ("text", Schema::string()),
            ])),
        ),
    ])
}

fn unavailable(e: impl std::fmt::Display) -> IntentError {
    log::warn!("intent agent call failed: {e}");
    IntentError::AgentUnavailable("no usable reply from the model".into())
}

fn context_json(c: &IntentContext) -> String {
    serde_json::to_string_pretty(c).expect("serializable")
}

/// One chat turn. Returns the new state and the assistant's reply; on error
/// the caller keeps the old state.
pub fn advance(
    state: &ConversationState,
    input: TurnInput,
    gateway: &Gateway,
    bundle: &PromptBundle,
    cfg: &Config,
) -> Result<(ConversationState, AssistantTurn), IntentError> {
    let mut next = state.clone();
    let user_text = match input {
        TurnInput::Message(text) => {
            if text.trim().is_empty() {
                return Err(IntentError::InvalidInput("message is empty".into()));
            }
            text
        }
        TurnInput::Form(answers) => {
            let form = state
                .pending_form
                .as_ref()
                .ok_or_else(|| IntentError::InvalidInput("there is no open question form".into()))?;
            let mut lines = Vec::new();
            for a in &answers {
                let q = form
                    .questions
                    .iter()
                    .find(|q| q.id == a.question_id)
                    .ok_or_else(|| IntentError::InvalidInput(format!("unknown question {}", a.question_id)))?;
                if let Some(ans) = a.answer.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
                    lines.push(format!("Q: {}\nA: {ans}", q.text));
                }
            }
            lines.join("\n\n")
        }
    };

    let profile = &cfg.frontend_model;
    let attempts = cfg.generation.structured_attempts;
    let base = |system: String, tag: &str| {
        ChatRequest::new(&profile.provider, &profile.model, vec![Message::system(system), Message::user(user_text.clone())])
            .with_temperature(profile.temperature)
            .with_max_tokens(profile.max_tokens)
            .with_tag(tag)
    };

    if !user_text.is_empty() {
        let req = base(bundle.render("intent/extract", &[("context", &context_json(&next.context))]), "intent.extract");
        let delta = gateway.complete_structured(&req, &extract_schema(), attempts).map_err(unavailable)?.value;
        apply_delta(&mut next.context, &delta);
        next.history.push(Message::user(user_text.clone()));
    }

    let max_q = MAX_QUESTIONS.to_string();
    let max_c = MAX_QUESTION_CHARS.to_string();
    let system = bundle.render(
        "intent/questions",
        &[("context", &context_json(&next.context)), ("max_questions", &max_q), ("max_chars", &max_c)],
    );
    let mut req = base(system, "intent.questions");
    if user_text.is_empty() {
        req.messages[1] = Message::user("(The user submitted the form without answering any question.)");
    }
    let reply = gateway.complete_structured(&req, &questions_schema(), attempts).map_err(unavailable)?.value;

    next.turns += 1;
    let questions: Vec<Question> = reply["questions"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default()
        .iter()
        .filter_map(|q| {
            let kind: QuestionKind = serde_json::from_value(q["kind"].clone()).ok()?;
            let text = truncate_words(q["text"].as_str()?, MAX_QUESTION_CHARS);
            (!text.is_empty()).then_some((kind, text))
        })
        .take(MAX_QUESTIONS)
        .enumerate()
        .map(|(i, (kind, text))| Question { id: format!("t{}-q{}", next.turns, i + 1), kind, text, answer: None })
        .collect();
    let message = reply["message"].as_str().unwrap_or_default().trim().to_owned();
    let form = (!questions.is_empty()).then_some(QuestionForm { questions });

    let mut transcript = message.clone();
    for q in form.iter().flat_map(|f| &f.questions) {
        transcript.push_str(&format!("\n- {}", q.text));
    }
    next.history.push(Message::assistant(transcript));
    next.pending_form = form.clone();
    let coverage_hint = next.coverage();
    Ok((next, AssistantTurn { message, form, coverage_hint }))
}

fn apply_delta(ctx: &mut IntentContext, delta: &Value) {
    if let Some(goal) = delta["goal"].as_str().map(str::trim).filter(|g| !g.is_empty()) {
        ctx.goal = Some(goal.to_owned());
    }
    for r in delta["new_requirements"].as_array().into_iter().flatten() {
        if let Some(r) = r.as_str() {
            ctx.add_requirement(r);
        }
    }
    for p in delta["preferences"].as_array().into_iter().flatten() {
        if let (Some(k), Some(v)) = (p["key"].as_str(), p["value"].as_str()) {
            let k = k.trim();
            if !k.is_empty() {
                ctx.preferences.insert(k.to_owned(), v.trim().to_owned());
            }
        }
    }
}

/// Headless path: one extraction call over the goal, no questions.
pub fn zero_shot(goal: &str, gateway: &Gateway, bundle: &PromptBundle, cfg: &Config) -> Result<IntentSpec, IntentError> {
    if goal.trim().is_empty() {
        return Err(IntentError::InvalidInput("goal is empty".into()));
    }
    let mut state = ConversationState::new("headless");
    let profile = &cfg.frontend_model;
    let req = ChatRequest::new(
        &profile.provider,
        &profile.model,
        vec![
            Message::system(bundle.render("intent/extract", &[("context", &context_json(&state.context))])),
            Message::user(goal),
        ],
    )
    .with_temperature(profile.temperature)
    .with_max_tokens(profile.max_tokens)
    .with_tag("intent.extract");
    let delta = gateway
        .complete_structured(&req, &extract_schema(), cfg.generation.structured_attempts)
        .map_err(unavailable)?
        .value;
    apply_delta(&mut state.context, &delta);
    state.history.push(Message::user(goal));
    finalize(&state)
}

/// The spec handed to the planner. Pure; never calls a model.
pub fn finalize(state: &ConversationState) -> Result<IntentSpec, IntentError> {
    let first = state
        .history
        .iter()
        .find(|m| m.role == Role::User)
        .ok_or(IntentError::EmptyConversation)?;
    let goal = state
        .context
        .goal
        .clone()
        .filter(|g| !g.trim().is_empty())
        .unwrap_or_else(|| first.content.clone());
    let transcript = json!(state.history);
    Ok(IntentSpec {
        goal,
        requirements: state.context.requirements.clone(),
        preferences: state.context.preferences.clone(),
        transcript_digest: sha256_hex(canonical_json(&transcript).as_bytes()),
    })
}
