//! A small, closed subset of JSON Schema for structured model output.
//!
//! Every object schema forbids additional properties. The same descriptor is
//! sent to providers (as JSON Schema) and used to validate replies.

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    String,
    Enum(Vec<String>),
    Number { min: Option<f64>, max: Option<f64> },
    Integer { min: Option<i64> },
    Boolean,
    Array { items: Box<Schema>, min_items: usize },
    Object { properties: Vec<(String, Schema)> },
    Nullable(Box<Schema>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl Schema {
    pub fn string() -> Schema {
        Schema::String
    }

    pub fn enumeration<I, S>(values: I) -> Schema
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Schema::Enum(values.into_iter().map(Into::into).collect())
    }

    pub fn number() -> Schema {
        Schema::Number { min: None, max: None }
    }

    pub fn unit_interval() -> Schema {
        Schema::Number { min: Some(0.0), max: Some(1.0) }
    }

    pub fn array(items: Schema) -> Schema {
        Schema::Array { items: Box::new(items), min_items: 0 }
    }

    pub fn non_empty_array(items: Schema) -> Schema {
        Schema::Array { items: Box::new(items), min_items: 1 }
    }

    /// All listed properties are required; nullable ones may be `null`.
    pub fn object<I, S>(properties: I) -> Schema
    where
        I: IntoIterator<Item = (S, Schema)>,
        S: Into<String>,
    {
        Schema::Object {
            properties: properties.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn nullable(self) -> Schema {
        Schema::Nullable(Box::new(self))
    }

    pub fn is_object(&self) -> bool {
        matches!(self, Schema::Object { .. })
    }

    pub fn to_json(&self) -> Value {
        match self {
            Schema::String => json!({"type": "string"}),
            Schema::Enum(values) => json!({"type": "string", "enum": values}),
            Schema::Number { min, max } => {
                let mut m = Map::new();
                m.insert("type".into(), "number".into());
                if let Some(min) = min {
                    m.insert("minimum".into(), json!(min));
                }
                if let Some(max) = max {
                    m.insert("maximum".into(), json!(max));
                }
                Value::Object(m)
            }
            Schema::Integer { min } => match min {
                Some(min) => json!({"type": "integer", "minimum": min}),
                None => json!({"type": "integer"}),
            },
            Schema::Boolean => json!({"type": "boolean"}),
            Schema::Array { items, min_items } => {
                if *min_items > 0 {
                    json!({"type": "array", "items": items.to_json(), "minItems": min_items})
                } else {
                    json!({"type": "array", "items": items.to_json()})
                }
            }
            Schema::Object { properties } => {
                let props: Map<String, Value> =
                    properties.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
                let required: Vec<&String> = properties.iter().map(|(k, _)| k).collect();
                json!({
                    "type": "object",
                    "properties": props,
                    "required": required,
                    "additionalProperties": false,
                })
            }
            Schema::Nullable(inner) => json!({"anyOf": [inner.to_json(), {"type": "null"}]}),
        }
    }

    pub fn validate(&self, value: &Value) -> Result<(), SchemaViolation> {
        self.check(value, "$")
    }

    fn check(&self, value: &Value, path: &str) -> Result<(), SchemaViolation> {
        let fail = |message: String| Err(SchemaViolation { path: path.to_owned(), message });
        match (self, value) {
            (Schema::Nullable(_), Value::Null) => Ok(()),
            (Schema::Nullable(inner), v) => inner.check(v, path),
            (Schema::String, Value::String(_)) => Ok(()),
            (Schema::Enum(values), Value::String(s)) => {
                if values.contains(s) {
                    Ok(())
                } else {
                    fail(format!("{s:?} is not one of {values:?}"))
                }
            }
            (Schema::Number { min, max }, Value::Number(n)) => {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if min.is_some_and(|m| x < m) || max.is_some_and(|m| x > m) {
                    fail(format!("{x} is out of range"))
                } else {
                    Ok(())
                }
            }
            (Schema::Integer { min }, Value::Number(n)) => match n.as_i64() {
                Some(i) if min.is_none_or(|m| i >= m) => Ok(()),
                Some(i) => fail(format!("{i} is below the minimum")),
                None => fail("expected an integer".into()),
            },
            (Schema::Boolean, Value::Bool(_)) => Ok(()),
            (Schema::Array { items, min_items }, Value::Array(values)) => {
                if values.len() < *min_items {
                    return fail(format!("expected at least {min_items} items"));
                }
                for (i, v) in values.iter().enumerate() {
                    items.check(v, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            (Schema::Object { properties }, Value::Object(map)) => {
                for key in map.keys() {
                    if !properties.iter().any(|(k, _)| k == key) {
                        return Err(SchemaViolation {
                            path: format!("{path}.{key}"),
                            message: "unexpected property".into(),
                        });
                    }
                }
                for (key, schema) in properties {
                    let sub = format!("{path}.{key}");
                    match map.get(key) {
                        Some(v) => schema.check(v, &sub)?,
                        None if matches!(schema, Schema::Nullable(_)) => {}
                        None => {
                            return Err(SchemaViolation { path: sub, message: "missing required property".into() })
                        }
                    }
                }
                Ok(())
            }
            (expected, got) => fail(format!("expected {}, got {}", expected.type_name(), json_type(got))),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Schema::String | Schema::Enum(_) => "string",
            Schema::Number { .. } => "number",
            Schema::Integer { .. } => "integer",
            Schema::Boolean => "boolean",
            Schema::Array { .. } => "array",
            Schema::Object { .. } => "object",
            Schema::Nullable(inner) => inner.type_name(),
        }
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// A minimal value satisfying a JSON Schema produced by [`Schema::to_json`].
/// Used by placeholder mocks.
pub fn example_for(schema: &Value) -> Value {
    if let Some(options) = schema.get("anyOf").and_then(Value::as_array) {
        return options.first().map(example_for).unwrap_or(Value::Null);
    }
    if let Some(values) = schema.get("enum").and_then(Value::as_array) {
        return values.first().cloned().unwrap_or(Value::Null);
    }
    match schema.get("type").and_then(Value::as_str) {
        Some("string") => json!("ok"),
        Some("number") => {
            let min = schema.get("minimum").and_then(Value::as_f64).unwrap_or(0.0);
            let max = schema.get("maximum").and_then(Value::as_f64).unwrap_or(min + 1.0);
            json!((min + max) / 2.0)
        }
        Some("integer") => json!(schema.get("minimum").and_then(Value::as_i64).unwrap_or(1)),
        Some("boolean") => json!(true),
        Some("array") => {
            let n = schema.get("minItems").and_then(Value::as_u64).unwrap_or(0);
            let item = schema.get("items").map(example_for).unwrap_or(Value::Null);
            Value::Array((0..n).map(|_| item.clone()).collect())
        }
        Some("object") => {
            let props = schema.get("properties").and_then(Value::as_object);
            Value::Object(
                props
                    .into_iter()
                    .flatten()
                    .map(|(k, v)| (k.clone(), example_for(v)))
                    .collect(),
            )
        }
        _ => Value::Null,
    }
}
