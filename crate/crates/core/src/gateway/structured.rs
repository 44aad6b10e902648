use serde_json::Value;
use thiserror::Error;

use super::{ChatRequest, Gateway, GatewayError, Message, Schema};

/// A schema-valid reply and how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Structured<T> {
    pub value: T,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructuredError {
    #[error("no valid structured reply after {} attempts: {last_error}", raw_attempts.len())]
    Failure { raw_attempts: Vec<String>, last_error: String },
    #[error("response schema must be a closed object schema")]
    NotAnObjectSchema,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl StructuredError {
    pub fn summary(&self) -> String {
        match self {
            StructuredError::Gateway(g) => g.summary(),
            other => other.to_string(),
        }
    }
}

/// Pulls a JSON object out of a model reply: the whole text, a fenced code
/// block, or the outermost `{...}` span.
pub fn extract_json(text: &str) -> Result<Value, String> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    if let Some(start) = trimmed.find("```") {
        let rest = &trimmed[start + 3..];
        let body_start = rest.find('\n').map(|i| i + 1).unwrap_or(0);
        if let Some(end) = rest[body_start..].find("```") {
            if let Ok(v) = serde_json::from_str::<Value>(rest[body_start..body_start + end].trim()) {
                return Ok(v);
            }
        }
    }
    if let (Some(a), Some(b)) = (trimmed.find('{'), trimmed.rfind('}')) {
        if a < b {
            if let Ok(v) = serde_json::from_str::<Value>(&trimmed[a..=b]) {
                return Ok(v);
            }
        }
    }
    Err("reply is not a JSON object".into())
}

fn corrective_message(error: &str) -> String {
    format!(
        "Your previous reply could not be used: {error}\n\
         Reply again with only a JSON object that matches the required schema."
    )
}

impl Gateway {
    /// Asks for a reply matching `schema`, retrying with the validation error
    /// appended to the conversation, up to `max_attempts` calls in total.
    pub fn complete_structured(
        &self,
        request: &ChatRequest,
        schema: &Schema,
        max_attempts: u32,
    ) -> Result<Structured<Value>, StructuredError> {
        self.complete_checked(request, schema, max_attempts, Ok)
    }

    /// Like [`Gateway::complete_structured`], with an extra semantic `check`
    /// on the schema-valid value. A check failure is fed back to the model
    /// like a schema failure.
    pub fn complete_checked<T, F>(
        &self,
        request: &ChatRequest,
        schema: &Schema,
        max_attempts: u32,
        check: F,
    ) -> Result<Structured<T>, StructuredError>
    where
        F: Fn(Value) -> Result<T, String>,
    {
        if !schema.is_object() {
            return Err(StructuredError::NotAnObjectSchema);
        }
        let mut req = request.clone();
        req.response_schema = Some(schema.to_json());

        let mut raw_attempts = Vec::new();
        let mut last_error = String::from("no attempts made");
        for attempt in 1..=max_attempts.max(1) {
            let reply = self.complete(&req)?;
            raw_attempts.push(reply.text.clone());
            let outcome = extract_json(&reply.text).and_then(|value| {
                schema.validate(&value).map_err(|v| v.to_string())?;
                check(value)
            });
            match outcome {
                Ok(value) => return Ok(Structured { value, attempts: attempt }),
                Err(e) => {
                    log::debug!("structured reply rejected (attempt {attempt}): {e}");
                    req.messages.push(Message::assistant(reply.text));
                    req.messages.push(Message::user(corrective_message(&e)));
                    last_error = e;
                }
            }
        }
        Err(StructuredError::Failure { raw_attempts, last_error })
    }

    /// Structured call deserialized into `T`.
    pub fn complete_typed<T: serde::de::DeserializeOwned>(
        &self,
        request: &ChatRequest,
        schema: &Schema,
        max_attempts: u32,
    ) -> Result<Structured<T>, StructuredError> {
        self.complete_checked(request, schema, max_attempts, |v| {
            serde_json::from_value(v).map_err(|e| e.to_string())
        })
    }
}
