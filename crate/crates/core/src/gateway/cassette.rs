//! Recorded request/response pairs, stored as canonical JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_schema: Option<serde_json::Value>,
}

impl From<&ChatRequest> for RecordedRequest {
    fn from(r: &ChatRequest) -> Self {
        RecordedRequest {
            provider: r.provider.clone(),
            model: r.model.clone(),
            temperature: r.temperature,
            messages: r.messages.clone(),
            response_schema: r.response_schema.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    /// Copy of the request, for human review of the cassette.
    pub request: RecordedRequest,
    pub response: ChatResponse,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteFile {
    entries: Vec<CassetteEntry>,
}

/// A keyed store of recorded responses. Loaded from a file or a directory of
/// `*.json` files; when created for recording, every append rewrites the
/// backing file (write to a temp file, then rename).
#[derive(Debug)]
pub struct Cassette {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, CassetteEntry>>,
}

impl Cassette {
    pub fn in_memory() -> Self {
        Cassette { path: None, entries: Mutex::new(BTreeMap::new()) }
    }

    /// Loads `path`, which may be a single cassette file or a directory.
    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let mut entries = BTreeMap::new();
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for file in files {
                read_into(&file, &mut entries)?;
            }
        } else {
            read_into(path, &mut entries)?;
        }
        Ok(Cassette { path: None, entries: Mutex::new(entries) })
    }

    /// A cassette that persists to `file`, keeping any entries already there.
    pub fn open_for_recording(file: impl Into<PathBuf>) -> io::Result<Self> {
        let file = file.into();
        let mut entries = BTreeMap::new();
        if file.exists() {
            read_into(&file, &mut entries)?;
        }
        Ok(Cassette { path: Some(file), entries: Mutex::new(entries) })
    }

    pub fn get(&self, key: &str) -> Option<CassetteEntry> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, entry: CassetteEntry) -> io::Result<()> {
        let mut entries = self.entries.lock().unwrap();
        entries.insert(entry.key.clone(), entry);
        if let Some(path) = &self.path {
            let doc = CassetteFile { entries: entries.values().cloned().collect() };
            write_atomic(path, &to_pretty(&doc))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Latest `recorded_at` across entries.
    pub fn latest_recording(&self) -> Option<DateTime<Utc>> {
        self.entries.lock().unwrap().values().map(|e| e.recorded_at).max()
    }

    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.entries.lock().unwrap().values().cloned().collect()
    }
}

fn read_into(path: &Path, entries: &mut BTreeMap<String, CassetteEntry>) -> io::Result<()> {
    let bytes = fs::read(path)?;
    let file: CassetteFile = serde_json::from_slice(&bytes).map_err(|e| {
        io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
    })?;
    for entry in file.entries {
        entries.insert(entry.key.clone(), entry);
    }
    Ok(())
}

fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("cassette serializes");
    out.push(b'\n');
    out
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
