//! Brace-delimited prompt templates.
//!
//! `{name}` marks a variable. `\{` and `\}` are literal braces and are kept
//! verbatim by [`TemplateString::render`], so a fully rendered template is
//! itself a template with zero variables. [`unescape`] produces the text a
//! model actually sees.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("malformed template at byte {offset}: {reason}")]
    MalformedTemplate { offset: usize, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    /// Literal text exactly as written in `raw`, escapes included.
    Literal(String),
    Variable(String),
}

/// A parsed template. Serializes as its raw string.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TemplateString {
    raw: String,
    variables: Vec<String>,
    segments: Vec<Segment>,
}

impl fmt::Debug for TemplateString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TemplateString")
            .field("raw", &self.raw)
            .field("variables", &self.variables)
            .finish()
    }
}

impl fmt::Display for TemplateString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

pub fn parse_template(raw: &str) -> Result<TemplateString, TemplateError> {
    let mut segments = Vec::new();
    let mut variables: Vec<String> = Vec::new();
    let mut literal = String::new();
    let mut chars = raw.char_indices().peekable();

    while let Some((offset, c)) = chars.next() {
        match c {
            '\\' => match chars.peek() {
                Some(&(_, next @ ('{' | '}'))) => {
                    literal.push('\\');
                    literal.push(next);
                    chars.next();
                }
                _ => literal.push('\\'),
            },
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, inner) in chars.by_ref() {
                    match inner {
                        '}' => {
                            closed = true;
                            break;
                        }
                        '{' => {
                            return Err(TemplateError::MalformedTemplate {
                                offset,
                                reason: "nested opening brace",
                            })
                        }
                        other => name.push(other),
                    }
                }
                if !closed {
                    return Err(TemplateError::MalformedTemplate {
                        offset,
                        reason: "unclosed brace",
                    });
                }
                if name.is_empty() || name.contains('\\') {
                    return Err(TemplateError::MalformedTemplate {
                        offset,
                        reason: "empty or invalid variable name",
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                if !variables.contains(&name) {
                    variables.push(name.clone());
                }
                segments.push(Segment::Variable(name));
            }
            '}' => {
                return Err(TemplateError::MalformedTemplate {
                    offset,
                    reason: "unmatched closing brace",
                })
            }
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }

    Ok(TemplateString {
        raw: raw.to_owned(),
        variables,
        segments,
    })
}

impl TemplateString {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Variable names in first-appearance order, deduplicated.
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn has_variables(&self) -> bool {
        !self.variables.is_empty()
    }

    pub fn contains_variable(&self, name: &str) -> bool {
        self.variables.iter().any(|v| v == name)
    }

    /// Substitutes every variable from `lookup`. Escapes in literal text are
    /// preserved; substituted values are inserted as given.
    pub fn render<'a, F>(&self, mut lookup: F) -> Result<String, String>
    where
        F: FnMut(&str) -> Option<&'a str>,
    {
        let mut out = String::with_capacity(self.raw.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Variable(name) => match lookup(name) {
                    Some(value) => out.push_str(value),
                    None => return Err(name.clone()),
                },
            }
        }
        Ok(out)
    }

    pub fn render_map(&self, bindings: &BTreeMap<String, String>) -> Result<String, String> {
        self.render(|name| bindings.get(name).map(String::as_str))
    }
}

impl TryFrom<String> for TemplateString {
    type Error = TemplateError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        parse_template(&raw)
    }
}

impl From<TemplateString> for String {
    fn from(t: TemplateString) -> Self {
        t.raw
    }
}

/// Turns `\{` / `\}` into literal braces.
pub fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(&next @ ('{' | '}')) = chars.peek() {
                out.push(next);
                chars.next();
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Escapes braces so arbitrary text can be stored as a zero-variable template.
pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '{' || c == '}' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}
