//! Filesystem persistence. Every document is one JSON file under a
//! per-collection directory; writes go through a temp file and a rename.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use flowsmith_core::assembler::ProgressEvent;
use flowsmith_core::executor::{RunResult, RunStatus};
use flowsmith_core::flow::{deserialize, serialize, Flow};
use flowsmith_core::gateway::write_atomic;
use flowsmith_core::intent::ConversationState;
use flowsmith_core::planner::Plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collection {
    Sessions,
    Flows,
    Plans,
    Jobs,
    Runs,
    Cassettes,
}

impl Collection {
    pub const ALL: [Collection; 6] = [
        Collection::Sessions,
        Collection::Flows,
        Collection::Plans,
        Collection::Jobs,
        Collection::Runs,
        Collection::Cassettes,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            Collection::Sessions => "sessions",
            Collection::Flows => "flows",
            Collection::Plans => "plans",
            Collection::Jobs => "jobs",
            Collection::Runs => "runs",
            Collection::Cassettes => "cassettes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Chatting,
    Generating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub state: ConversationState,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    /// Flows generated in this session, oldest first.
    #[serde(default)]
    pub flows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum JobPhase {
    Planning,
    Generating { done: usize, total: usize },
    Connecting,
    Reviewing,
    Done,
    Failed { error: String },
}

impl JobPhase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobPhase::Done | JobPhase::Failed { .. })
    }

    fn rank(&self) -> (u8, usize) {
        match self {
            JobPhase::Planning => (0, 0),
            JobPhase::Generating { done, .. } => (1, *done),
            JobPhase::Connecting => (2, 0),
            JobPhase::Reviewing => (3, 0),
            JobPhase::Done | JobPhase::Failed { .. } => (4, 0),
        }
    }

    /// Whether moving from `self` to `next` keeps the phase order within one
    /// generation attempt.
    pub fn precedes(&self, next: &JobPhase) -> bool {
        self.rank() <= next.rank()
    }
}

impl From<ProgressEvent> for JobPhase {
    fn from(e: ProgressEvent) -> Self {
        match e {
            ProgressEvent::Planning => JobPhase::Planning,
            ProgressEvent::Generating { done, total } => JobPhase::Generating { done, total },
            ProgressEvent::Connecting => JobPhase::Connecting,
            ProgressEvent::Reviewing => JobPhase::Reviewing,
            ProgressEvent::Done => JobPhase::Done,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    #[serde(flatten)]
    pub phase: JobPhase,
    /// Starts at 1; a reviewer-requested replan starts the next attempt.
    pub attempt: u32,
    pub result: Option<String>,
    #[serde(default)]
    pub plans: Vec<String>,
    #[serde(default)]
    pub review_exhausted: bool,
    #[serde(default)]
    pub cancel_requested: bool,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    #[serde(flatten)]
    pub result: RunResult,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

/// Ids become file names, so only a conservative alphabet is accepted.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("workspace documents serialize");
    out.push(b'\n');
    out
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Workspace> {
        let root = root.into();
        for c in Collection::ALL {
            fs::create_dir_all(root.join(c.dir()))?;
        }
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, c: Collection, id: &str) -> PathBuf {
        self.root.join(c.dir()).join(format!("{id}.json"))
    }

    fn put_bytes(&self, c: Collection, id: &str, bytes: &[u8]) -> io::Result<()> {
        if !valid_id(id) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("invalid id {id:?}")));
        }
        write_atomic(&self.path(c, id), bytes)
    }

    fn get_bytes(&self, c: Collection, id: &str) -> io::Result<Option<Vec<u8>>> {
        if !valid_id(id) {
            return Ok(None);
        }
        match fs::read(self.path(c, id)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put<T: Serialize>(&self, c: Collection, id: &str, value: &T) -> io::Result<()> {
        self.put_bytes(c, id, &pretty(value))
    }

    pub fn get<T: DeserializeOwned>(&self, c: Collection, id: &str) -> io::Result<Option<T>> {
        let Some(bytes) = self.get_bytes(c, id)? else { return Ok(None) };
        serde_json::from_slice(&bytes).map(Some).map_err(|e| invalid(&self.path(c, id), e))
    }

    pub fn ids(&self, c: Collection) -> io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join(c.dir()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_owned))
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn put_flow(&self, flow: &Flow) -> io::Result<()> {
        self.put_bytes(Collection::Flows, flow.id(), &serialize(flow))
    }

    pub fn get_flow(&self, id: &str) -> io::Result<Option<Flow>> {
        let Some(bytes) = self.get_bytes(Collection::Flows, id)? else { return Ok(None) };
        deserialize(&bytes).map(Some).map_err(|e| invalid(&self.path(Collection::Flows, id), e))
    }

    pub fn put_plan(&self, id: &str, plan: &Plan) -> io::Result<()> {
        self.put(Collection::Plans, id, plan)
    }

    /// Settles state left behind by a process that stopped mid-way: jobs and
    /// runs still in progress are marked failed, and their sessions reopen.
    pub fn recover(&self, now: DateTime<Utc>) -> io::Result<usize> {
        let mut settled = 0;
        for id in self.ids(Collection::Jobs)? {
            let Some(mut job) = self.get::<Job>(Collection::Jobs, &id)? else { continue };
            if job.phase.is_terminal() {
                continue;
            }
            job.phase = JobPhase::Failed { error: "interrupted by a service restart".into() };
            job.updated_at = now;
            self.put(Collection::Jobs, &id, &job)?;
            settled += 1;
        }
        for id in self.ids(Collection::Sessions)? {
            let Some(mut s) = self.get::<Session>(Collection::Sessions, &id)? else { continue };
            if s.status == SessionStatus::Generating {
                s.status = SessionStatus::Chatting;
                self.put(Collection::Sessions, &id, &s)?;
                settled += 1;
            }
        }
        for id in self.ids(Collection::Runs)? {
            let Some(mut r) = self.get::<RunRecord>(Collection::Runs, &id)? else { continue };
            if r.result.status == RunStatus::Running {
                r.result.status = RunStatus::Failed { node: String::new(), error: "interrupted by a service restart".into() };
                r.result.finished_at = Some(now);
                self.put(Collection::Runs, &id, &r)?;
                settled += 1;
            }
        }
        Ok(settled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        for c in Collection::ALL {
            assert!(dir.path().join(c.dir()).is_dir());
        }
        ws.put(Collection::Plans, "p1", &serde_json::json!({"a": 1})).unwrap();
        let v: serde_json::Value = ws.get(Collection::Plans, "p1").unwrap().unwrap();
        assert_eq!(v["a"], 1);
        assert_eq!(ws.ids(Collection::Plans).unwrap(), vec!["p1"]);
        assert!(ws.get::<serde_json::Value>(Collection::Plans, "../etc").unwrap().is_none());
        assert!(ws.put(Collection::Plans, "../x", &1).is_err());
    }

    #[test]
    fn phase_order() {
        let g = |d| JobPhase::Generating { done: d, total: 4 };
        assert!(JobPhase::Planning.precedes(&g(0)));
        assert!(g(1).precedes(&g(2)));
        assert!(!g(2).precedes(&g(1)));
        assert!(!JobPhase::Reviewing.precedes(&JobPhase::Connecting));
        assert!(JobPhase::Connecting.precedes(&JobPhase::Failed { error: "x".into() }));
    }

    #[test]
    fn recover_settles_unfinished_work() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let now = DateTime::UNIX_EPOCH;
        let job = Job {
            id: "j".into(),
            session_id: "s".into(),
            phase: JobPhase::Connecting,
            attempt: 1,
            result: None,
            plans: vec![],
            review_exhausted: false,
            cancel_requested: false,
            created_at: now,
            updated_at: now,
        };
        ws.put(Collection::Jobs, "j", &job).unwrap();
        let session = Session {
            id: "s".into(),
            state: ConversationState::new("s"),
            created_at: now,
            status: SessionStatus::Generating,
            flows: vec![],
        };
        ws.put(Collection::Sessions, "s", &session).unwrap();
        assert_eq!(ws.recover(now).unwrap(), 2);
        let job: Job = ws.get(Collection::Jobs, "j").unwrap().unwrap();
        assert!(matches!(job.phase, JobPhase::Failed { .. }));
        let s: Session = ws.get(Collection::Sessions, "s").unwrap().unwrap();
        assert_eq!(s.status, SessionStatus::Chatting);
        assert_eq!(ws.recover(now).unwrap(), 0);
    }
}
