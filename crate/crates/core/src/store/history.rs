use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{append_line, drop_torn_tail, Fault, Store};
use crate::error::IoContext;
use crate::scoring::ScoredFrame;
use crate::{Error, Result};

pub const DEFAULT_BUCKET_WIDTH: f64 = 0.6;
pub const DEFAULT_TREND_FACTOR: f64 = 1.5;
const HEADER: &str = "date,run_id,risk_weighted_score,frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub date: NaiveDate,
    pub run_id: String,
    /// Largest risk-weighted score of the run's frames in the bucket.
    pub risk_weighted_score: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionHistory {
    pub bucket_width: f64,
    pub buckets: BTreeMap<i64, Vec<HistoryEntry>>,
}

impl InspectionHistory {
    pub fn new(bucket_width: f64) -> Result<Self> {
        check_width(bucket_width)?;
        Ok(Self {
            bucket_width,
            buckets: BTreeMap::new(),
        })
    }

    pub fn bucket_of(&self, position_m: f64) -> i64 {
        (position_m / self.bucket_width).floor() as i64
    }

    pub fn entries(&self, bucket: i64) -> &[HistoryEntry] {
        self.buckets.get(&bucket).map_or(&[], Vec::as_slice)
    }

    /// Per-bucket entries one run would add.
    pub fn summarize(&self, run_id: &str, date: NaiveDate, scored: &[ScoredFrame]) -> Result<BTreeMap<i64, HistoryEntry>> {
        let mut out: BTreeMap<i64, HistoryEntry> = BTreeMap::new();
        for s in scored {
            let pos = s
                .position_m
                .ok_or_else(|| Error::Precondition(format!("frame `{}` has no track position", s.frame_id)))?;
            let e = out.entry(self.bucket_of(pos)).or_insert_with(|| HistoryEntry {
                date,
                run_id: run_id.to_string(),
                risk_weighted_score: f64::NEG_INFINITY,
                frames: 0,
            });
            e.risk_weighted_score = e.risk_weighted_score.max(s.risk_weighted_score);
            e.frames += 1;
        }
        Ok(out)
    }
}

fn check_width(w: f64) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::ConfigField {
            field: "bucket_width_m".into(),
            reason: format!("{w} is not positive"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub appended: Vec<i64>,
    /// Buckets this run had already recorded identically.
    pub unchanged: Vec<i64>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord, Clone)]
struct IndexLine {
    run_id: String,
    bucket: i64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    bucket_width_m: f64,
}

fn bucket_path(dir: &Path, bucket: i64) -> PathBuf {
    dir.join(format!("{bucket}.csv"))
}

fn read_bucket(path: &Path) -> Result<Vec<HistoryEntry>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn bucket_files(dir: &Path) -> Result<Vec<(i64, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).at(dir)? {
        let p = e.at(dir)?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            if let Some(b) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                out.push((b, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_index(path: &Path) -> Result<BTreeSet<IndexLine>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(BTreeSet::new()) };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Drop torn rows and index any committed rows the index lacks.
pub(super) fn recover(store: &Store) -> Result<()> {
    let dir = store.history_dir();
    let index = dir.join("index.jsonl");
    drop_torn_tail(&index)?;
    let known = read_index(&index)?;
    for (bucket, path) in bucket_files(&dir)? {
        drop_torn_tail(&path)?;
        for e in read_bucket(&path)? {
            let line = IndexLine { run_id: e.run_id, bucket };
            if !known.contains(&line) {
                append_line(&index, &serde_json::to_string(&line)?)?;
            }
        }
    }
    Ok(())
}

fn stored_width(dir: &Path) -> Result<Option<f64>> {
    let p = dir.join("meta.json");
    match std::fs::read_to_string(&p) {
        Ok(t) => Ok(Some(serde_json::from_str::<Meta>(&t)?.bucket_width_m)),
        Err(_) => Ok(None),
    }
}

impl Store {
    /// Current history; an empty store adopts `bucket_width`.
    pub fn history(&self, bucket_width: f64) -> Result<InspectionHistory> {
        check_width(bucket_width)?;
        let dir = self.history_dir();
        let width = stored_width(&dir)?.unwrap_or(bucket_width);
        let mut h = InspectionHistory::new(width)?;
        for (b, p) in bucket_files(&dir)? {
            h.buckets.insert(b, read_bucket(&p)?);
        }
        Ok(h)
    }

    /// Append one run's risk-weighted scores, one entry per position bucket.
    pub fn record_inspection(
        &self,
        run_id: &str,
        scored: &[ScoredFrame],
        date: NaiveDate,
        bucket_width: f64,
    ) -> Result<(InspectionHistory, RecordOutcome)> {
        check_width(bucket_width)?;
        let guard = self.lock()?;
        let dir = self.history_dir();
        match stored_width(&dir)? {
            Some(w) if w != bucket_width => {
                return Err(Error::ConfigField {
                    field: "bucket_width_m".into(),
                    reason: format!("history was recorded with {w} m buckets"),
                })
            }
            Some(_) => {}
            None => super::write_atomic(&dir.join("meta.json"), serde_json::to_string(&Meta { bucket_width_m: bucket_width })?.as_bytes())?,
        }
        let history = self.history(bucket_width)?;
        let index = dir.join("index.jsonl");
        let known = read_index(&index)?;
        let new = history.summarize(run_id, date, scored)?;
        let mut outcome = RecordOutcome::default();
        let mut todo = Vec::new();
        // validate everything before the first write
        for (&bucket, e) in &new {
            let line = IndexLine {
                run_id: run_id.to_string(),
                bucket,
            };
            let existing = history.entries(bucket);
            if known.contains(&line) {
                if existing.iter().any(|x| x == e) {
                    outcome.unchanged.push(bucket);
                    continue;
                }
                return Err(Error::Store(format!("run `{run_id}` already recorded bucket {bucket} with different data")));
            }
            if let Some(last) = existing.last() {
                if last.date > date {
                    return Err(Error::Store(format!(
                        "bucket {bucket} already has an inspection dated {}, after {date}",
                        last.date
                    )));
                }
            }
            todo.push((bucket, e.clone(), line));
        }
        let mut guard = guard;
        for (bucket, e, line) in todo {
            let path = bucket_path(&dir, bucket);
            let fresh = !path.exists();
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.serialize(&e)?;
            let row = String::from_utf8(w.into_inner().map_err(|e| Error::Store(e.to_string()))?).expect("utf-8");
            if fresh {
                append_line(&path, HEADER)?;
            }
            append_line(&path, row.trim_end())?;
            guard = self.fault_point(Fault::AfterDataWrite, guard)?;
            append_line(&index, &serde_json::to_string(&line)?)?;
            outcome.appended.push(bucket);
        }
        drop(guard);
        Ok((self.history(bucket_width)?, outcome))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub bucket: i64,
    pub latest: f64,
    pub latest_date: NaiveDate,
    pub prior_mean: f64,
    pub prior_max: f64,
    /// Entries averaged; at most the requested window.
    pub window_used: usize,
    pub abs_change: f64,
    /// Relative to the prior mean; absent when that mean is 0.
    pub rel_change: Option<f64>,
    pub factor: f64,
    /// The latest score exceeds `factor ×` the prior mean.
    pub flagged: bool,
}

/// Latest score of a bucket against the `window` entries before it.
pub fn prognostic_compare(history: &InspectionHistory, bucket: i64, window: usize, factor: f64) -> Result<TrendReport> {
    if window == 0 {
        return Err(Error::ConfigField {
            field: "trend_window".into(),
            reason: "window must be at least 1".into(),
        });
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::ConfigField {
            field: "trend_factor".into(),
            reason: format!("{factor} is not positive"),
        });
    }
    let entries = history.entries(bucket);
    if entries.len() < 2 {
        return Err(Error::InsufficientHistory {
            bucket,
            entries: entries.len(),
        });
    }
    let (latest, earlier) = entries.split_last().expect("two entries");
    let prior = &earlier[earlier.len().saturating_sub(window)..];
    let prior_mean = prior.iter().map(|e| e.risk_weighted_score).sum::<f64>() / prior.len() as f64;
    let prior_max = prior.iter().map(|e| e.risk_weighted_score).fold(f64::NEG_INFINITY, f64::max);
    let abs_change = latest.risk_weighted_score - prior_mean;
    Ok(TrendReport {
        bucket,
        latest: latest.risk_weighted_score,
        latest_date: latest.date,
        prior_mean,
        prior_max,
        window_used: prior.len(),
        abs_change,
        rel_change: (prior_mean != 0.0).then(|| abs_change / prior_mean),
        factor,
        flagged: latest.risk_weighted_score > factor * prior_mean,
    })
}
