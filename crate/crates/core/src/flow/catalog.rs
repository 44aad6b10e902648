use serde::Serialize;

use super::{NodeKind, FIELDS_HANDLE, RESPONSES_HANDLE};

/// Which input handle a connection lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InputHandle {
    /// Any declared template variable of the target.
    Variable,
    /// The `responses` handle.
    Responses,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectionRule {
    pub source: NodeKind,
    pub source_handle: &'static str,
    pub target_handle: InputHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedBy {
    Agent,
    /// Added deterministically by the assembler; never planned.
    Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub kind: NodeKind,
    pub display_name: &'static str,
    pub description: &'static str,
    pub incoming: Vec<ConnectionRule>,
    pub outgoing: Vec<(NodeKind, InputHandle)>,
    pub generated_by: GeneratedBy,
}

/// The node kinds a flow may contain and how they may be wired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl Default for NodeCatalog {
    fn default() -> Self {
        NodeCatalog::standard()
    }
}

impl NodeCatalog {
    pub fn standard() -> Self {
        use InputHandle::*;
        use NodeKind::*;

        let fields = |source| ConnectionRule {
            source,
            source_handle: FIELDS_HANDLE,
            target_handle: Variable,
        };
        let responses = |source| ConnectionRule {
            source,
            source_handle: RESPONSES_HANDLE,
            target_handle: Responses,
        };

        NodeCatalog {
            entries: vec![
                CatalogEntry {
                    kind: TextFields,
                    display_name: "TextFields Node",
                    description: "A list of text values used as input data. Values may contain \
                                  {variables}, which makes each value a prompt template of its own \
                                  (template chaining): feeding such a node into a Prompt node \
                                  compares prompt alternatives.",
                    incoming: vec![fields(TextFields)],
                    outgoing: vec![(TextFields, Variable), (Prompt, Variable)],
                    generated_by: GeneratedBy::Agent,
                },
                CatalogEntry {
                    kind: Prompt,
                    display_name: "Prompt Node",
                    description: "A prompt template queried against one or more models. Each \
                                  {variable} in the template is filled from the connected input \
                                  node; every combination of values is sent to every model.",
                    incoming: vec![fields(TextFields)],
                    outgoing: vec![(CodeEvaluator, Responses), (LLMScorer, Responses)],
                    generated_by: GeneratedBy::Agent,
                },
                CatalogEntry {
                    kind: CodeEvaluator,
                    display_name: "Code Evaluator Node",
                    description: "A program with a single `evaluate` entry point that scores each \
                                  model response, returning a boolean or a number.",
                    incoming: vec![responses(Prompt)],
                    outgoing: vec![(Vis, Responses)],
                    generated_by: GeneratedBy::Agent,
                },
                CatalogEntry {
                    kind: LLMScorer,
                    display_name: "LLM Scorer Node",
                    description: "A judge model grades each response with a rubric prompt that \
                                  contains the {response} placeholder.",
                    incoming: vec![responses(Prompt)],
                    outgoing: vec![(Vis, Responses)],
                    generated_by: GeneratedBy::Agent,
                },
                CatalogEntry {
                    kind: Vis,
                    display_name: "Vis Node",
                    description: "Aggregates evaluator scores grouped by model or by an input \
                                  variable.",
                    incoming: vec![responses(CodeEvaluator), responses(LLMScorer)],
                    outgoing: vec![],
                    generated_by: GeneratedBy::Rule,
                },
            ],
        }
    }

    pub fn entry(&self, kind: NodeKind) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    pub fn contains(&self, kind: NodeKind) -> bool {
        self.entry(kind).is_some()
    }

    pub fn kinds(&self) -> impl Iterator<Item = NodeKind> + '_ {
        self.entries.iter().map(|e| e.kind)
    }

    /// Whether an edge `source.source_handle -> target.<handle>` is allowed.
    pub fn permits(
        &self,
        source: NodeKind,
        source_handle: &str,
        target: NodeKind,
        target_handle: InputHandle,
    ) -> bool {
        self.entry(target).is_some_and(|entry| {
            entry.incoming.iter().any(|rule| {
                rule.source == source
                    && rule.source_handle == source_handle
                    && rule.target_handle == target_handle
            })
        })
    }

    /// Text block describing every node kind and its connection rules, used
    /// verbatim in agent prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&format!("- {} ({})\n", entry.kind, entry.display_name));
            out.push_str(&format!("  description: {}\n", entry.description));
            if entry.incoming.is_empty() {
                out.push_str("  accepts input from: nothing\n");
            } else {
                let ins: Vec<String> = entry
                    .incoming
                    .iter()
                    .map(|r| {
                        let target = match r.target_handle {
                            InputHandle::Variable => "a template variable",
                            InputHandle::Responses => "its responses input",
                        };
                        format!("{}.{} into {}", r.source, r.source_handle, target)
                    })
                    .collect();
                out.push_str(&format!("  accepts input from: {}\n", ins.join("; ")));
            }
            if entry.outgoing.is_empty() {
                out.push_str("  may feed: nothing\n");
            } else {
                let outs: Vec<&str> = entry.outgoing.iter().map(|(k, _)| k.as_str()).collect();
                out.push_str(&format!("  may feed: {}\n", outs.join(", ")));
            }
            if entry.generated_by == GeneratedBy::Rule {
                out.push_str("  added automatically; do not plan this kind\n");
            }
        }
        out
    }
}
