//! On-disk run records and inspection history.
//!
//! ```text
//! <root>/runs/<run_id>/...        artifacts of one run, plus record.json
//! <root>/runs/index.jsonl         one line per finished run
//! <root>/history/<bucket>.csv     inspections of one position bucket
//! <root>/history/index.jsonl      one line per committed (run_id, bucket)
//! ```

pub mod history;
mod lock;

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::{Error, Result};

pub use history::{prognostic_compare, HistoryEntry, InspectionHistory, RecordOutcome, TrendReport, DEFAULT_BUCKET_WIDTH, DEFAULT_TREND_FACTOR};
pub use lock::{acquire, LockGuard};

pub const FAULT_ENV: &str = "FCDD_FAULT";
const LOCK_TIMEOUT: Duration = Duration::from_secs(30);

/// Simulated crash points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Data rows are durable but the index line is not.
    AfterDataWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FaultMode {
    /// Abort the process, leaving the lock file behind.
    Abort,
    /// Return an error, leaving the lock file behind.
    Error,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    f.write_all(line.as_bytes()).at(path)?;
    f.write_all(b"\n").at(path)?;
    f.sync_data().at(path)
}

/// Drop a trailing line that was never terminated by a newline.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new().write(true).open(path).at(path)?;
    f.set_len(keep as u64).at(path)?;
    f.sync_data().at(path)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub role: String,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Content digest of command, config, seed and inputs; shared by reruns.
    pub run_key: String,
    pub created: String,
    pub command: String,
    pub config_digest: String,
    #[serde(default)]
    pub manifest_digest: Option<String>,
    pub artifacts: Vec<ArtifactRef>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn artifact(&self, role: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.role == role)
    }
}

pub struct Store {
    root: PathBuf,
    fault: Option<(Fault, FaultMode)>,
}

impl Store {
    /// Open or create a store, finishing any interrupted index update.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in ["runs", "history"] {
            let p = root.join(d);
            std::fs::create_dir_all(&p).at(&p)?;
        }
        let fault = match std::env::var(FAULT_ENV).ok().as_deref() {
            Some("after-data-write") => Some((Fault::AfterDataWrite, FaultMode::Abort)),
            _ => None,
        };
        let store = Self { root, fault };
        {
            let _g = store.lock()?;
            store.recover_runs()?;
            store.recover_history()?;
        }
        Ok(store)
    }

    /// Make the store fail at `fault` with an error instead of a crash.
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault.map(|f| (f, FaultMode::Error));
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn runs_index(&self) -> PathBuf {
        self.root.join("runs").join("index.jsonl")
    }

    pub(crate) fn history_dir(&self) -> PathBuf {
        self.root.join("history")
    }

    pub(crate) fn lock(&self) -> Result<LockGuard> {
        acquire(&self.root.join(".lock"), LOCK_TIMEOUT)
    }

    pub(crate) fn fault_point(&self, at: Fault, guard: LockGuard) -> Result<LockGuard> {
        match self.fault {
            Some((f, FaultMode::Abort)) if f == at => std::process::abort(),
            Some((f, FaultMode::Error)) if f == at => {
                guard.abandon();
                Err(Error::Store(format!("injected fault {at:?}")))
            }
            _ => Ok(guard),
        }
    }

    fn indexed_runs(&self) -> Result<Vec<String>> {
        let path = self.runs_index();
        let Ok(text) = std::fs::read_to_string(&path) else { return Ok(Vec::new()) };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<IndexLine>(l)?.run_id))
            .collect()
    }

    fn recover_runs(&self) -> Result<()> {
        let index = self.runs_index();
        drop_torn_tail(&index)?;
        let known: BTreeSet<String> = self.indexed_runs()?.into_iter().collect();
        let mut pending: Vec<String> = Vec::new();
        let runs = self.root.join("runs");
        for e in std::fs::read_dir(&runs).at(&runs)? {
            let e = e.at(&runs)?;
            let id = e.file_name().to_string_lossy().into_owned();
            if e.path().join("record.json").is_file() && !known.contains(&id) {
                pending.push(id);
            }
        }
        pending.sort();
        for id in pending {
            append_line(&index, &serde_json::to_string(&IndexLine { run_id: id })?)?;
        }
        Ok(())
    }

    fn recover_history(&self) -> Result<()> {
        history::recover(self)
    }

    /// Start a run directory named `<utc time>-<key prefix>`.
    pub fn begin_run(&self, command: &str, config_text: &str, manifest_digest: Option<String>, key_material: &[u8]) -> Result<RunWriter> {
        let config_digest = sha256_hex(config_text.as_bytes());
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(config_text.as_bytes());
        h.update([0]);
        h.update(manifest_digest.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        h.update(key_material);
        let run_key = hex::encode(h.finalize())[..16].to_string();
        let now = chrono::Utc::now();
        let stem = format!("{}-{}", now.format("%Y%m%dT%H%M%S%.3fZ"), run_key);
        let mut run_id = stem.clone();
        let mut n = 1;
        let dir = loop {
            let dir = self.run_dir(&run_id);
            match std::fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    run_id = format!("{stem}-{n}");
                }
                Err(e) => return Err(Error::Io { path: dir, source: e }),
            }
        };
        let mut w = RunWriter {
            dir,
            record: RunRecord {
                run_id,
                run_key,
                created: now.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                command: command.to_string(),
                config_digest,
                manifest_digest,
                artifacts: Vec::new(),
                notes: Vec::new(),
            },
            index: self.runs_index(),
            done: false,
        };
        w.write("config", "config.toml", config_text.as_bytes())?;
        Ok(w)
    }

    /// Records of finished runs in commit order.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        self.indexed_runs()?.iter().map(|id| self.record(id)).collect()
    }

    pub fn record(&self, run_id: &str) -> Result<RunRecord> {
        let p = self.run_dir(run_id).join("record.json");
        let text = std::fs::read_to_string(&p).map_err(|_| Error::Store(format!("no finished run `{run_id}`")))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every referenced file exists and matches its digest.
    pub fn verify(&self, record: &RunRecord) -> Result<()> {
        let dir = self.run_dir(&record.run_id);
        for a in &record.artifacts {
            let p = dir.join(&a.path);
            let bytes = std::fs::read(&p).map_err(|_| Error::Store(format!("run `{}` lost {}", record.run_id, a.path)))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(Error::Store(format!("run `{}`: {} does not match its digest", record.run_id, a.path)));
            }
        }
        Ok(())
    }

    pub fn artifact_path(&self, record: &RunRecord, role: &str) -> Result<PathBuf> {
        record
            .artifact(role)
            .map(|a| self.run_dir(&record.run_id).join(&a.path))
            .ok_or_else(|| Error::Store(format!("run `{}` has no {role}", record.run_id)))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    run_id: String,
}

/// Writes the artifacts of one run; nothing is indexed until [`RunWriter::finish`].
pub struct RunWriter {
    dir: PathBuf,
    record: RunRecord,
    index: PathBuf,
    done: bool,
}

impl Drop for RunWriter {
    /// A run that never finished leaves no directory behind.
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

impl RunWriter {
    pub fn run_id(&self) -> &str {
        &self.record.run_id
    }

    pub fn run_key(&self) -> &str {
        &self.record.run_key
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write a new artifact; existing files are never replaced.
    pub fn write(&mut self, role: &str, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).at(&path)?;
        f.write_all(bytes).at(&path)?;
        self.record.artifacts.push(ArtifactRef {
            role: role.to_string(),
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.record.notes.push(text.into());
    }

    pub fn finish(mut self) -> Result<RunRecord> {
        write_atomic(&self.dir.join("record.json"), (serde_json::to_string_pretty(&self.record)? + "\n").as_bytes())?;
        self.done = true;
        append_line(&self.index, &serde_json::to_string(&IndexLine { run_id: self.record.run_id.clone() })?)?;
        Ok(self.record.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_indexed_and_verified() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut w = store.begin_run("train", "seed = 1\n", Some("abc".into()), b"").unwrap();
        w.write("metrics", "metrics.json", b"{}\n").unwrap();
        assert!(w.write("metrics", "metrics.json", b"{}\n").is_err());
        let rec = w.finish().unwrap();
        assert_eq!(store.records().unwrap(), vec![rec.clone()]);
        store.verify(&rec).unwrap();
        let again = store.begin_run("train", "seed = 1\n", Some("abc".into()), b"").unwrap().finish().unwrap();
        assert_ne!(again.run_id, rec.run_id);
        assert_eq!(again.run_key, rec.run_key);
        std::fs::write(store.run_dir(&rec.run_id).join("metrics.json"), b"tampered").unwrap();
        assert!(store.verify(&rec).is_err());
    }

    #[test]
    fn unindexed_record_is_rolled_forward() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let rec = store.begin_run("synth", "", None, b"").unwrap().finish().unwrap();
        let index = store.runs_index();
        // lose the index line and leave a torn one instead
        std::fs::write(&index, b"{\"run_id\":\"trunc").unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.records().unwrap(), vec![rec]);
    }
}
