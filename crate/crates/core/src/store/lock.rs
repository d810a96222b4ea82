use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::error::IoContext;
use crate::{Error, Result};

/// Exclusive lock held while the file exists; released on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Leave the lock file behind, as a killed process would.
    pub(crate) fn abandon(self) {
        std::mem::forget(self);
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn holder(path: &Path) -> Option<u32> {
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

fn is_stale(path: &Path) -> bool {
    let proc_root = Path::new("/proc");
    match holder(path) {
        Some(pid) if proc_root.is_dir() => !proc_root.join(pid.to_string()).exists(),
        Some(_) => false,
        // A lock without a readable pid is only trusted while it is fresh.
        None => std::fs::metadata(path)
            .and_then(|m| m.modified())
            .map(|t| t.elapsed().unwrap_or_default() > Duration::from_secs(10))
            .unwrap_or(true),
    }
}

pub fn acquire(path: &Path, timeout: Duration) -> Result<LockGuard> {
    let start = Instant::now();
    loop {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                write!(f, "{}", std::process::id()).at(path)?;
                return Ok(LockGuard { path: path.to_path_buf() });
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                if is_stale(path) {
                    let _ = std::fs::remove_file(path);
                    continue;
                }
                if start.elapsed() >= timeout {
                    return Err(Error::Store(format!(
                        "{} is held by pid {}",
                        path.display(),
                        holder(path).map_or("?".into(), |p| p.to_string())
                    )));
                }
                std::thread::sleep(Duration::from_millis(25));
            }
            Err(e) => return Err(Error::Io { path: path.into(), source: e }),
        }
    }
}
