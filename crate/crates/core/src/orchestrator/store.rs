//! On-disk run state, so suspended runs survive a restart.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>.json           RunState
//! runs/<run_id>.events.jsonl   event log, one record per line
//! runs/<run_id>.head           head digest of the log
//! ```

use std::path::{Path, PathBuf};

use super::runtime::{RunHandle, RunState};
use super::OrchestratorError;
use crate::audit::{read_jsonl, verify_log_with_head, write_jsonl, EventRecord, LogVerdict};

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

fn store_err(e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Store(e.to_string())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), OrchestratorError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(store_err)?;
    std::fs::rename(&tmp, path).map_err(store_err)
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("runs")).map_err(store_err)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, run_id: &str, suffix: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}{suffix}"))
    }

    fn check_id(run_id: &str) -> Result<(), OrchestratorError> {
        let ok = !run_id.is_empty()
            && run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(OrchestratorError::UnknownRun(run_id.to_string()))
        }
    }

    pub fn exists(&self, run_id: &str) -> bool {
        Self::check_id(run_id).is_ok() && self.path(run_id, ".json").is_file()
    }

    /// Writes the events first and the state last, so a state file always
    /// has its events on disk.
    pub fn save(&self, handle: &RunHandle) -> Result<(), OrchestratorError> {
        let id = &handle.state.run_id;
        Self::check_id(id)?;
        let events = self.path(id, ".events.jsonl");
        let tmp = events.with_extension("tmp");
        write_jsonl(&tmp, &handle.records()).map_err(store_err)?;
        std::fs::rename(&tmp, &events).map_err(store_err)?;
        write_atomic(&self.path(id, ".head"), handle.log.head_digest().as_bytes())?;
        let state = serde_json::to_vec_pretty(&handle.state).map_err(store_err)?;
        write_atomic(&self.path(id, ".json"), &state)
    }

    /// Loads a run's state and its verified event log.
    pub fn load(&self, run_id: &str) -> Result<(RunState, Vec<EventRecord>), OrchestratorError> {
        Self::check_id(run_id)?;
        let state_path = self.path(run_id, ".json");
        if !state_path.is_file() {
            return Err(OrchestratorError::UnknownRun(run_id.to_string()));
        }
        let state: RunState =
            serde_json::from_slice(&std::fs::read(&state_path).map_err(store_err)?).map_err(store_err)?;
        let records = read_jsonl(&self.path(run_id, ".events.jsonl")).map_err(store_err)?;
        let head = std::fs::read_to_string(self.path(run_id, ".head")).map_err(store_err)?;
        match verify_log_with_head(&records, head.trim()) {
            LogVerdict::Intact => Ok((state, records)),
            LogVerdict::Broken { first_bad_seq } => Err(OrchestratorError::Store(format!(
                "event log for {run_id} is broken at seq {first_bad_seq}"
            ))),
        }
    }

    pub fn run_ids(&self) -> Vec<String> {
        let Ok(dir) = std::fs::read_dir(self.root.join("runs")) else {
            return Vec::new();
        };
        let mut ids: Vec<String> = dir
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                let id = name.strip_suffix(".json")?;
                (!id.contains('.')).then(|| id.to_string())
            })
            .collect();
        ids.sort();
        ids
    }

    /// `run-N` one past the largest N on disk.
    pub fn next_run_id(&self) -> String {
        let max = self
            .run_ids()
            .iter()
            .filter_map(|id| id.strip_prefix("run-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        format!("run-{}", max + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_id_counts_up_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.next_run_id(), "run-1");
        std::fs::write(dir.path().join("runs/run-7.json"), "{}").unwrap();
        std::fs::write(dir.path().join("runs/run-3.json"), "{}").unwrap();
        assert_eq!(store.next_run_id(), "run-8");
    }

    #[test]
    fn rejects_path_like_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(matches!(store.load("../etc"), Err(OrchestratorError::UnknownRun(_))));
        assert!(matches!(store.load("run-9"), Err(OrchestratorError::UnknownRun(_))));
    }
}
