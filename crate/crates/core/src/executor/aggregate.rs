use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalScore, ScoreValue};
use crate::flow::{GroupBy, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("metric {metric:?} cannot summarize {found} scores")]
pub struct MetricTypeMismatch {
    pub metric: Metric,
    pub found: &'static str,
}

fn type_name(v: &ScoreValue) -> &'static str {
    match v {
        ScoreValue::Bool(_) => "boolean",
        ScoreValue::Number(_) => "number",
        ScoreValue::Label(_) => "label",
    }
}

/// Groups scores and summarizes each group. Groups come out in lexicographic
/// order. For [`Metric::Count`] with label scores, each group is further
/// split per label (`group / label`).
pub fn aggregate(scores: &[EvalScore], group_by: &GroupBy, metric: Metric) -> Result<Vec<AggregateRow>, MetricTypeMismatch> {
    let mut groups: BTreeMap<String, Vec<&ScoreValue>> = BTreeMap::new();
    for s in scores {
        let key = match group_by {
            GroupBy::Model => s.model.clone(),
            GroupBy::Variable(name) => s.vars.get(name).cloned().unwrap_or_default(),
        };
        groups.entry(key).or_default().push(&s.value);
    }

    let mut rows = Vec::with_capacity(groups.len());
    for (group, values) in groups {
        let n = values.len();
        match metric {
            Metric::PassRate => {
                let mut passed = 0usize;
                for v in &values {
                    match v {
                        ScoreValue::Bool(b) => passed += usize::from(*b),
                        other => return Err(MetricTypeMismatch { metric, found: type_name(other) }),
                    }
                }
                rows.push(AggregateRow { group, value: passed as f64 / n as f64, count: n });
            }
            Metric::Mean => {
                let mut sum = 0.0f64;
                for v in &values {
                    sum += match v {
                        ScoreValue::Number(x) => *x,
                        ScoreValue::Bool(b) => f64::from(u8::from(*b)),
                        other => return Err(MetricTypeMismatch { metric, found: type_name(other) }),
                    };
                }
                rows.push(AggregateRow { group, value: sum / n as f64, count: n });
            }
            Metric::Count => {
                let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
                for v in &values {
                    if let ScoreValue::Label(l) = v {
                        *labels.entry(l.as_str()).or_default() += 1;
                    }
                }
                if labels.is_empty() {
                    rows.push(AggregateRow { group, value: n as f64, count: n });
                } else {
                    for (label, c) in labels {
                        rows.push(AggregateRow { group: format!("{group} / {label}"), value: c as f64, count: c });
                    }
                }
            }
        }
    }
    Ok(rows)
}
