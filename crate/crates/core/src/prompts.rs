//! Agent prompt templates. The built-in bundle is compiled in from
//! `prompts/`; a directory with the same layout can override any file.
//!
//! Placeholders are `{{name}}`, distinct from flow-template braces so prompt
//! text can show `{variable}` examples literally.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::gateway::sha256_hex;

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../prompts/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "intent/extract",
    "intent/questions",
    "planner/plan",
    "nodegen/TextFields",
    "nodegen/Prompt",
    "nodegen/CodeEvaluator",
    "nodegen/LLMScorer",
    "assembler/connect",
    "assembler/review",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    templates: BTreeMap<String, String>,
}

impl Default for PromptBundle {
    fn default() -> Self {
        PromptBundle::builtin()
    }
}

impl PromptBundle {
    pub fn builtin() -> Self {
        PromptBundle {
            templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Built-in bundle with files from `dir` (e.g. `dir/planner/plan.txt`)
    /// taking precedence.
    pub fn with_overrides(dir: &Path) -> io::Result<Self> {
        let mut bundle = PromptBundle::builtin();
        for name in BUILTIN.iter().map(|(k, _)| *k) {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                bundle.templates.insert(name.to_owned(), fs::read_to_string(path)?);
            }
        }
        Ok(bundle)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn raw(&self, name: &str) -> &str {
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("prompt template {name} is not in the bundle"))
    }

    /// Content hash over every template.
    pub fn version(&self) -> String {
        let mut all = String::new();
        for (k, v) in &self.templates {
            all.push_str(k);
            all.push('\0');
            all.push_str(v);
            all.push('\0');
        }
        sha256_hex(all.as_bytes())[..12].to_owned()
    }

    /// Fills `{{key}}` placeholders. Unknown placeholders are left in place.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut out = self.raw(name).to_owned();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out
    }
}
