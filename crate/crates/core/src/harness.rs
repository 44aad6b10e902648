//! Structural grading of flows: does the flow compare two prompts, does it
//! run, does it use template chaining.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::executor::{expand, run_flow, EvaluatorRunner, RunOptions, RunStatus};
use crate::flow::{deserialize, validate, Flow, NodeCatalog, NodeKind};
use crate::gateway::{Gateway, MockBackend};
use crate::Parallelism;

pub const FLOW_SUFFIX: &str = ".flow.json";
const DRY_RUN_REPLY: &str = "Placeholder response for a dry run.";
const CHAINED: &str = "via chained TextFields";
const NOT_COMPARING: &str = "no chained template yields two prompt texts for one input context";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeDetails {
    pub compares_two_prompts: Vec<String>,
    pub runs: Vec<String>,
    pub uses_template_chaining: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeReport {
    pub flow_id: String,
    pub compares_two_prompts: bool,
    pub runs: bool,
    pub uses_template_chaining: bool,
    pub details: GradeDetails,
}

pub fn grade(flow: &Flow, catalog: &NodeCatalog, evaluators: &EvaluatorRunner) -> GradeReport {
    let (compares, mut compare_evidence) = compares_two_prompts(flow);
    let (runs, run_evidence) = runs(flow, catalog, evaluators);
    let (chaining, chain_evidence) = uses_template_chaining(flow);
    if chaining && !compare_evidence.iter().any(|e| e.contains(CHAINED)) {
        compare_evidence.push(format!("exception: template chaining is present but {NOT_COMPARING}"));
    }
    GradeReport {
        flow_id: flow.id().to_owned(),
        compares_two_prompts: compares,
        runs,
        uses_template_chaining: chaining,
        details: GradeDetails {
            compares_two_prompts: compare_evidence,
            runs: run_evidence,
            uses_template_chaining: chain_evidence,
        },
    }
}

/// True when some Prompt node receives at least two distinct resolved texts
/// for one model and one set of data (non-template) bindings, or when two
/// Prompt nodes with different templates read a common input.
fn compares_two_prompts(flow: &Flow) -> (bool, Vec<String>) {
    let mut evidence = Vec::new();
    for node in flow.nodes().iter().filter(|n| n.kind == NodeKind::Prompt) {
        let Ok(instances) = expand(flow, node) else { continue };
        let mut contexts: BTreeMap<(String, BTreeMap<String, String>), BTreeSet<&str>> = BTreeMap::new();
        for i in &instances {
            contexts.entry((i.model.label(), i.leaf_bindings())).or_default().insert(&i.final_text);
        }
        if let Some(((model, _), texts)) = contexts.iter().find(|(_, t)| t.len() >= 2) {
            let chained: BTreeSet<&str> = instances
                .iter()
                .flat_map(|i| i.bindings.values())
                .filter(|b| b.template.is_some())
                .map(|b| b.source_node.as_str())
                .collect();
            evidence.push(format!(
                "{} receives {} distinct prompts for one input context (model {model}) {CHAINED} {}",
                node.id,
                texts.len(),
                chained.into_iter().collect::<Vec<_>>().join(", ")
            ));
        }
    }

    let prompts: Vec<_> = flow.nodes().iter().filter_map(|n| n.as_prompt().map(|p| (n, p))).collect();
    for (i, (a, pa)) in prompts.iter().enumerate() {
        for (b, pb) in &prompts[i + 1..] {
            if pa.template.raw() == pb.template.raw() {
                continue;
            }
            let sa: BTreeSet<&str> = flow.incoming(&a.id).map(|e| e.from_node.as_str()).collect();
            let sb: BTreeSet<&str> = flow.incoming(&b.id).map(|e| e.from_node.as_str()).collect();
            if let Some(shared) = sa.intersection(&sb).next() {
                evidence.push(format!("{} and {} use different templates over shared input {shared}", a.id, b.id));
            }
        }
    }
    if evidence.is_empty() {
        evidence.push("no Prompt node receives two prompt variants for the same inputs".into());
        return (false, evidence);
    }
    (true, evidence)
}

fn runs(flow: &Flow, catalog: &NodeCatalog, evaluators: &EvaluatorRunner) -> (bool, Vec<String>) {
    let report = validate(flow, catalog);
    if !report.is_valid() {
        let rules = report.rules().into_iter().map(|r| format!("validation failed: {}", r.as_str())).collect();
        return (false, rules);
    }
    if !flow.nodes().iter().any(|n| n.kind == NodeKind::Prompt) {
        return (false, vec!["flow has no Prompt node".into()]);
    }
    let gateway = Gateway::mock(Arc::new(MockBackend::placeholder(DRY_RUN_REPLY)));
    let opts = RunOptions { parallelism: Parallelism::Sequential, check_only: true, ..RunOptions::default() };
    match run_flow(flow, catalog, &gateway, evaluators, &opts) {
        Ok(r) => match r.status {
            RunStatus::Succeeded => (true, vec![format!("dry run completed: {} mock responses", r.response_count())]),
            RunStatus::Failed { node, error } => (false, vec![format!("dry run failed at {node}: {error}")]),
            RunStatus::Running => (false, vec!["dry run did not finish".into()]),
        },
        Err(e) => (false, vec![e.to_string()]),
    }
}

fn uses_template_chaining(flow: &Flow) -> (bool, Vec<String>) {
    let mut evidence = Vec::new();
    for e in flow.edges() {
        let (Some(src), Some(dst)) = (flow.node(&e.from_node), flow.node(&e.to_node)) else { continue };
        let Some(fields) = src.as_text_fields() else { continue };
        let Some(p) = dst.as_prompt() else { continue };
        if p.template.contains_variable(&e.to_handle) && fields.fields.iter().any(|f| f.has_variables()) {
            evidence.push(format!("template values of {} feed {}", src.id, e.label()));
        }
    }
    if evidence.is_empty() {
        evidence.push("no TextFields node with template values feeds a Prompt node".into());
        return (false, evidence);
    }
    (true, evidence)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchError {
    pub file: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub reports: Vec<GradeReport>,
    pub errors: Vec<BatchError>,
}

impl BatchReport {
    /// Counts of (compares_two_prompts, runs, uses_template_chaining).
    pub fn totals(&self) -> (usize, usize, usize) {
        let count = |f: fn(&GradeReport) -> bool| self.reports.iter().filter(|r| f(r)).count();
        (count(|r| r.compares_two_prompts), count(|r| r.runs), count(|r| r.uses_template_chaining))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row = |w: &mut csv::Writer<Vec<u8>>, cells: [&str; 4]| w.write_record(cells).expect("in-memory write");
        row(&mut w, ["flow_id", "compares_two_prompts", "runs", "uses_template_chaining"]);
        for r in &self.reports {
            let b = |v: bool| if v { "true" } else { "false" };
            row(&mut w, [&r.flow_id, b(r.compares_two_prompts), b(r.runs), b(r.uses_template_chaining)]);
        }
        let n = self.reports.len();
        let (c, r, t) = self.totals();
        row(&mut w, ["TOTAL", &format!("{c}/{n}"), &format!("{r}/{n}"), &format!("{t}/{n}")]);
        for e in &self.errors {
            row(&mut w, ["ERROR", &e.file, &e.message, ""]);
        }
        String::from_utf8(w.into_inner().expect("flushed")).expect("utf-8")
    }
}

pub fn corpus_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(FLOW_SUFFIX)))
        .collect();
    files.sort();
    Ok(files)
}

/// Grades every `*.flow.json` in `dir`. Unreadable documents are listed as
/// errors; they do not stop the batch.
pub fn batch(dir: &Path, catalog: &NodeCatalog, evaluators: &EvaluatorRunner, mode: Parallelism) -> io::Result<BatchReport> {
    let files = corpus_files(dir)?;
    let results = crate::par::map(mode, &files, |path| {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = fs::read(path).map_err(|e| BatchError { file: name.clone(), message: e.to_string() })?;
        let flow = deserialize(&bytes).map_err(|e| BatchError { file: name, message: e.to_string() })?;
        Ok::<_, BatchError>(grade(&flow, catalog, evaluators))
    });
    let mut report = BatchReport::default();
    for r in results {
        match r {
            Ok(g) => report.reports.push(g),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{parse_template, CodeEvaluatorPayload, Edge, ModelRef, Node, NodePayload, Provenance};
    use chrono::DateTime;

    fn t(s: &str) -> crate::flow::TemplateString {
        parse_template(s).unwrap()
    }

    fn two_models() -> Vec<ModelRef> {
        vec![ModelRef::new("p", "a"), ModelRef::new("p", "b")]
    }

    fn flow(nodes: Vec<Node>, edges: Vec<Edge>) -> Flow {
        Flow::new("f", "f", nodes, edges, DateTime::UNIX_EPOCH, Provenance::Manual)
    }

    fn g(f: &Flow) -> (bool, bool, bool) {
        let r = grade(f, &NodeCatalog::standard(), &EvaluatorRunner::default());
        (r.compares_two_prompts, r.runs, r.uses_template_chaining)
    }

    #[test]
    fn tutorial_shape() {
        let f = flow(
            vec![
                Node::text_fields("a", "text", vec![t("para one"), t("para two")]),
                Node::text_fields("b", "prompts", vec![t("Summarize {text}"), t("Condense {text}")]),
                Node::prompt("c", "p", t("{prompts}"), two_models()),
                Node::new(
                    "d",
                    "len",
                    NodePayload::CodeEvaluator(CodeEvaluatorPayload { language: "expr".into(), program: "evaluate(r) = number(r.text) > 1".into() }),
                ),
            ],
            vec![
                Edge::new("a", "fields", "b", "text"),
                Edge::new("b", "fields", "c", "prompts"),
                Edge::new("c", "responses", "d", "responses"),
            ],
        );
        assert_eq!(g(&f), (true, true, true));
        let r = grade(&f, &NodeCatalog::standard(), &EvaluatorRunner::default());
        assert!(r.details.compares_two_prompts[0].contains("chained TextFields b"));
    }

    #[test]
    fn single_template() {
        let f = flow(
            vec![Node::text_fields("a", "text", vec![t("x")]), Node::prompt("c", "p", t("Summarize {text}"), two_models())],
            vec![Edge::new("a", "fields", "c", "text")],
        );
        assert_eq!(g(&f), (false, true, false));
    }

    #[test]
    fn two_prompt_nodes_sharing_input() {
        let f = flow(
            vec![
                Node::text_fields("a", "text", vec![t("x")]),
                Node::prompt("c", "p", t("Summarize {text}"), two_models()),
                Node::prompt("d", "p", t("Condense {text}"), two_models()),
            ],
            vec![Edge::new("a", "fields", "c", "text"), Edge::new("a", "fields", "d", "text")],
        );
        assert_eq!(g(&f), (true, true, false));
    }

    #[test]
    fn unbound_variable_does_not_run() {
        let f = flow(vec![Node::prompt("c", "p", t("Summarize {text}"), two_models())], vec![]);
        let r = grade(&f, &NodeCatalog::standard(), &EvaluatorRunner::default());
        assert!(!r.runs);
        assert!(r.details.runs.iter().any(|d| d.contains("unbound_variable")));
    }

    #[test]
    fn batch_with_malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let report = batch(dir.path(), &NodeCatalog::standard(), &EvaluatorRunner::default(), Parallelism::Parallel).unwrap();
        assert_eq!(report.totals(), (0, 0, 0));
        assert!(report.to_csv().contains("TOTAL,0/0,0/0,0/0"));

        let f = flow(vec![Node::text_fields("a", "text", vec![t("x")]), Node::prompt("c", "p", t("{text}"), two_models())], vec![Edge::new("a", "fields", "c", "text")]);
        fs::write(dir.path().join("good.flow.json"), crate::flow::serialize(&f)).unwrap();
        fs::write(dir.path().join("bad.flow.json"), b"{not json").unwrap();
        fs::write(dir.path().join("ignored.txt"), b"x").unwrap();
        let report = batch(dir.path(), &NodeCatalog::standard(), &EvaluatorRunner::default(), Parallelism::Parallel).unwrap();
        assert_eq!(report.reports.len(), 1);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].file, "bad.flow.json");
        let csv = report.to_csv();
        assert!(csv.starts_with("flow_id,compares_two_prompts,runs,uses_template_chaining\n"));
        assert!(csv.contains("TOTAL,0/1,1/1,0/1"));
        assert!(csv.contains("ERROR,bad.flow.json"));
    }
}
