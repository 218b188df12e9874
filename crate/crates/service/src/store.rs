//! On-disk layout of a stream:
//!
//! ```text
//! <data_dir>/streams/<id>/stream.json   stream config, written once
//! <data_dir>/streams/<id>/runlog.jsonl  one committed day per line
//! <data_dir>/streams/<id>/state.json    calibrator snapshot after the last commit
//! ```
//!
//! A commit appends the day line and syncs it before the snapshot is
//! replaced, so the log is never behind the snapshot. On load the log is the
//! source of truth and the snapshot only supplies the day-index counter.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tandem_core::calibrator::CalibratorState;
use tandem_core::runlog::RunLog;

use crate::config::StreamConfig;
use crate::error::ApiError;

const CONFIG_FILE: &str = "stream.json";
const LOG_FILE: &str = "runlog.jsonl";
const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: CalibratorState,
    /// Next day index to hand out; discarded days also consume indices.
    pub next_day_index: u64,
}

#[derive(Debug)]
pub struct StreamStore {
    dir: PathBuf,
}

/// Everything recovered for one stream.
#[derive(Debug)]
pub struct Loaded {
    pub config: StreamConfig,
    pub log: RunLog,
    pub snapshot: Option<Snapshot>,
    pub store: StreamStore,
    /// A torn final line that was dropped during recovery.
    pub dropped_tail: Option<String>,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> ApiError {
    ApiError::Storage(format!("{}: {e}", path.display()))
}

impl StreamStore {
    /// Creates the directory for a new stream and writes its config.
    pub fn create(data_dir: &Path, id: &str, config: &StreamConfig) -> Result<Self, ApiError> {
        let dir = data_dir.join("streams").join(id);
        if dir.join(CONFIG_FILE).exists() {
            return Err(ApiError::StreamExists(id.to_string()));
        }
        fs::create_dir_all(&dir).map_err(|e| storage(&dir, e))?;
        let path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(config).map_err(|e| storage(&path, e))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    /// Appends one committed day and then replaces the snapshot.
    pub fn commit(&self, line: &str, snapshot: &Snapshot) -> Result<(), ApiError> {
        let path = self.log_path();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| storage(&path, e))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .and_then(|_| file.sync_data())
            .map_err(|e| storage(&path, e))?;
        self.write_snapshot(snapshot)
    }

    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<(), ApiError> {
        let path = self.dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(snapshot).map_err(|e| storage(&path, e))?;
        write_atomic(&path, text.as_bytes())
    }

    /// Loads every stream under `data_dir/streams`, in name order.
    pub fn load_all(data_dir: &Path) -> Result<Vec<Loaded>, ApiError> {
        let root = data_dir.join("streams");
        if !root.exists() {
            return Ok(Vec::new());
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| storage(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CONFIG_FILE).is_file())
            .collect();
        dirs.sort();
        dirs.into_iter().map(|dir| Self::load(&dir)).collect()
    }

    fn load(dir: &Path) -> Result<Loaded, ApiError> {
        let config_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&config_path).map_err(|e| storage(&config_path, e))?;
        let config: StreamConfig =
            serde_json::from_str(&text).map_err(|e| storage(&config_path, e))?;

        let log_path = dir.join(LOG_FILE);
        let (log, dropped_tail) = if log_path.exists() {
            read_log_repairing(&log_path)?
        } else {
            (RunLog::default(), None)
        };

        let state_path = dir.join(STATE_FILE);
        let snapshot = if state_path.exists() {
            let text = fs::read_to_string(&state_path).map_err(|e| storage(&state_path, e))?;
            serde_json::from_str(&text).ok()
        } else {
            None
        };
        Ok(Loaded {
            config,
            log,
            snapshot,
            store: StreamStore {
                dir: dir.to_path_buf(),
            },
            dropped_tail,
        })
    }
}

/// Reads a log, dropping a final line cut short by a crash mid-append.
fn read_log_repairing(path: &Path) -> Result<(RunLog, Option<String>), ApiError> {
    let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
    match RunLog::parse_str(&text) {
        Ok(log) => Ok((log, None)),
        Err(err) => {
            // Only an unterminated last line counts as torn; anything else is
            // real corruption and must not be papered over.
            if text.ends_with('\n') {
                return Err(storage(path, err));
            }
            let cut = text.rfind('\n').map_or(0, |i| i + 1);
            let (kept, torn) = text.split_at(cut);
            let log = RunLog::parse_str(kept).map_err(|e| storage(path, e))?;
            write_atomic(path, kept.as_bytes())?;
            Ok((log, Some(torn.to_string())))
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_data())
        .map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}
