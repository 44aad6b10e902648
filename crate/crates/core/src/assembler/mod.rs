//! Stitches planner and task-agent output into one validated, laid-out
//! flow, with an optional review-and-replan loop.

mod connect;
mod layout;
mod review;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use connect::{connect, vis_rule, ConnectionUnresolvable};
pub use layout::{depths, layout};
pub use review::{review, summarize, ReviewIssue, ReviewVerdict};

use crate::clock::Clock;
use crate::config::Config;
use crate::executor::EvaluatorRunner;
use crate::flow::{validate, Flow, NodeCatalog, Provenance, ValidationReport};
use crate::gateway::Gateway;
use crate::intent::{truncate_words, IntentSpec};
use crate::nodegen::{Agents, GenError};
use crate::planner::{make_plan, Plan, PlanError};
use crate::prompts::PromptBundle;
use crate::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum ProgressEvent {
    Planning,
    Generating { done: usize, total: usize },
    Connecting,
    Reviewing,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub flow: Flow,
    /// Every plan made, in order; more than one when the reviewer asked for
    /// a replan.
    pub plans: Vec<Plan>,
    pub verdicts: Vec<ReviewVerdict>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssembleError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Generate(#[from] GenError),
    #[error(transparent)]
    Connect(#[from] ConnectionUnresolvable),
    #[error("the assembled flow does not validate:\n{0}")]
    InvalidFlow(ValidationReport),
    #[error("the reviewer still reports problems after the allowed replans")]
    ReviewExhausted(Box<Assembly>),
}

/// Everything generation needs.
pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    pub bundle: &'a PromptBundle,
    pub cfg: &'a Config,
    pub catalog: &'a NodeCatalog,
    pub evaluators: &'a EvaluatorRunner,
    pub parallelism: Parallelism,
    pub clock: Clock,
}

/// Flow id derived from the intent, so re-generating the same intent under
/// replay yields the same document.
pub fn flow_id_for(intent: &IntentSpec) -> String {
    format!("flow-{}", &intent.digest()[..12])
}

impl Pipeline<'_> {
    pub fn assemble(
        &self,
        intent: &IntentSpec,
        progress: &(dyn Fn(ProgressEvent) + Sync),
    ) -> Result<Assembly, AssembleError> {
        let mut spec = intent.clone();
        let mut plans = Vec::new();
        let mut verdicts = Vec::new();
        let mut replans = 0;
        loop {
            progress(ProgressEvent::Planning);
            let plan = make_plan(&spec, self.catalog, self.gateway, self.bundle, self.cfg)?;
            plans.push(plan.clone());
            let flow = self.build(&plan, &spec, intent, progress)?;

            if !self.cfg.generation.reviewer {
                progress(ProgressEvent::Done);
                return Ok(Assembly { flow, plans, verdicts });
            }
            progress(ProgressEvent::Reviewing);
            let verdict = review(&flow, &spec, self.gateway, self.bundle, self.cfg);
            verdicts.push(verdict.clone());
            if verdict.pass {
                progress(ProgressEvent::Done);
                return Ok(Assembly { flow, plans, verdicts });
            }
            if replans >= self.cfg.generation.max_review_loops {
                progress(ProgressEvent::Done);
                return Err(AssembleError::ReviewExhausted(Box::new(Assembly { flow, plans, verdicts })));
            }
            replans += 1;
            let note = verdict.replan_note();
            if !note.is_empty() {
                spec.requirements.push(note);
            }
        }
    }

    fn build(
        &self,
        plan: &Plan,
        spec: &IntentSpec,
        original: &IntentSpec,
        progress: &(dyn Fn(ProgressEvent) + Sync),
    ) -> Result<Flow, AssembleError> {
        let agents = Agents { gateway: self.gateway, bundle: self.bundle, cfg: self.cfg, evaluators: self.evaluators };
        let total = plan.tasks.len();
        progress(ProgressEvent::Generating { done: 0, total });
        let nodes = agents.generate_all(plan, spec, self.parallelism, &|done, total| {
            progress(ProgressEvent::Generating { done, total })
        })?;

        progress(ProgressEvent::Connecting);
        let mut edges = connect(&nodes, plan, self.catalog, self.gateway, self.bundle, self.cfg)?;
        let mut all: BTreeMap<String, crate::flow::Node> = nodes.clone();
        if let Some((vis, edge)) = vis_rule(&nodes, plan, &edges, &format!("node-{}", total + 1)) {
            all.insert(String::from("~vis"), vis);
            edges.push(edge);
        }

        let flow = Flow::new(
            flow_id_for(original),
            truncate_words(&original.goal, 60),
            all.into_values().collect(),
            edges,
            self.clock.now(),
            Provenance::Generated,
        );
        let flow = layout(flow);
        let report = validate(&flow, self.catalog);
        if !report.is_valid() {
            return Err(AssembleError::InvalidFlow(report));
        }
        Ok(flow)
    }
}
