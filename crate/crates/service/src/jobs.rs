//! Background work: generation jobs and flow runs. Both persist their
//! progress to the workspace as they go, so pollers and a restarted process
//! see the same state.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use chrono::Utc;

use flowsmith_core::assembler::{AssembleError, ProgressEvent};
use flowsmith_core::executor::{RunError, RunResult, RunStatus};
use flowsmith_core::flow::Flow;
use flowsmith_core::intent::{IntentError, IntentSpec};
use flowsmith_core::planner::PlanError;

use crate::engine::{Engine, GenerateError};
use crate::workspace::{Collection, Job, JobPhase, RunRecord, Session, SessionStatus, Workspace};

pub struct Shared {
    pub ws: Workspace,
    pub engine: Engine,
    cancelled: Mutex<HashSet<String>>,
}

impl Shared {
    pub fn new(ws: Workspace, engine: Engine) -> Shared {
        Shared { ws, engine, cancelled: Mutex::new(HashSet::new()) }
    }

    pub fn request_cancel(&self, job_id: &str) {
        self.cancelled.lock().unwrap().insert(job_id.to_owned());
    }

    fn is_cancelled(&self, job_id: &str) -> bool {
        self.cancelled.lock().unwrap().contains(job_id)
    }
}

/// Message for a failed generation. Gateway details stay in the log.
pub fn describe(e: &GenerateError) -> String {
    match e {
        GenerateError::Intent(IntentError::AgentUnavailable(_)) => "the assistant could not be reached".into(),
        GenerateError::Intent(other) => other.to_string(),
        GenerateError::Assemble(AssembleError::Plan(PlanError::StructuredOutputFailure(_))) => {
            "the planner did not return a usable plan".into()
        }
        GenerateError::Assemble(AssembleError::Generate(g)) => g.to_string(),
        GenerateError::Assemble(other) => other.to_string(),
    }
}

fn save_job(shared: &Shared, job: &mut Job) {
    job.updated_at = Utc::now();
    job.cancel_requested = shared.is_cancelled(&job.id);
    if let Err(e) = shared.ws.put(Collection::Jobs, &job.id, job) {
        log::error!("cannot persist job {}: {e}", job.id);
    }
}

fn reopen_session(shared: &Shared, session_id: &str, flow: Option<&str>) {
    match shared.ws.get::<Session>(Collection::Sessions, session_id) {
        Ok(Some(mut s)) => {
            s.status = SessionStatus::Chatting;
            s.flows.extend(flow.map(str::to_owned));
            if let Err(e) = shared.ws.put(Collection::Sessions, session_id, &s) {
                log::error!("cannot persist session {session_id}: {e}");
            }
        }
        Ok(None) => log::warn!("session {session_id} vanished during generation"),
        Err(e) => log::error!("cannot read session {session_id}: {e}"),
    }
}

/// Runs one generation job to completion. Blocking.
pub fn generate(shared: &Shared, job: Job, intent: IntentSpec) {
    let job = Mutex::new(job);
    let started = Mutex::new(false);
    let progress = |event: ProgressEvent| {
        if event == ProgressEvent::Done {
            return;
        }
        let mut j = job.lock().unwrap();
        let mut started = started.lock().unwrap();
        if event == ProgressEvent::Planning && *started {
            j.attempt += 1;
        }
        *started = true;
        j.phase = event.into();
        save_job(shared, &mut j);
    };
    let outcome = shared.engine.assemble(intent, &progress);
    let mut job = job.into_inner().unwrap();

    let flow_id = match outcome {
        _ if shared.is_cancelled(&job.id) => {
            job.phase = JobPhase::Failed { error: "cancelled".into() };
            None
        }
        Ok(generated) => {
            let persisted = generated.assembly.plans.iter().enumerate().try_for_each(|(i, plan)| {
                let id = format!("{}-{}", job.id, i + 1);
                job.plans.push(id.clone());
                shared.ws.put_plan(&id, plan)
            });
            let persisted = persisted.and_then(|_| shared.ws.put_flow(&generated.assembly.flow));
            match persisted {
                Ok(()) => {
                    job.phase = JobPhase::Done;
                    job.review_exhausted = generated.review_exhausted;
                    job.result = Some(generated.assembly.flow.id().to_owned());
                    job.result.clone()
                }
                Err(e) => {
                    log::error!("cannot persist generated flow: {e}");
                    job.phase = JobPhase::Failed { error: "the generated flow could not be saved".into() };
                    None
                }
            }
        }
        Err(e) => {
            log::warn!("generation job {} failed: {e}", job.id);
            job.phase = JobPhase::Failed { error: describe(&e) };
            None
        }
    };
    save_job(shared, &mut job);
    reopen_session(shared, &job.session_id, flow_id.as_deref());
}

pub fn new_run(flow: &Flow) -> RunResult {
    RunResult {
        flow_id: flow.id().to_owned(),
        nodes: Default::default(),
        started_at: Utc::now(),
        finished_at: None,
        status: RunStatus::Running,
    }
}

/// Executes `flow`, writing a snapshot after every node. Blocking.
pub fn execute(shared: Arc<Shared>, run_id: String, flow: Flow) {
    let mut opts = shared.engine.run_options();
    opts.clock = flowsmith_core::clock::Clock::System;
    let snap_shared = shared.clone();
    let snap_id = run_id.clone();
    opts.on_snapshot = Some(Arc::new(move |r: &RunResult| {
        let rec = RunRecord { id: snap_id.clone(), result: r.clone() };
        if let Err(e) = snap_shared.ws.put(Collection::Runs, &snap_id, &rec) {
            log::error!("cannot persist run {snap_id}: {e}");
        }
    }));
    let result = match shared.engine.run(&flow, &opts) {
        Ok(r) => r,
        Err(RunError::InvalidFlow(report)) => {
            let mut r = new_run(&flow);
            r.status = RunStatus::Failed { node: String::new(), error: format!("flow is invalid:\n{report}") };
            r.finished_at = Some(Utc::now());
            r
        }
    };
    let rec = RunRecord { id: run_id.clone(), result };
    if let Err(e) = shared.ws.put(Collection::Runs, &run_id, &rec) {
        log::error!("cannot persist run {run_id}: {e}");
    }
}
