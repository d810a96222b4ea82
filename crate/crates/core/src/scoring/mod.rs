//! Frame scores, position-dependent risk weighting, thresholds and histograms.

mod histogram;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::Label;
use crate::error::IoContext;
use crate::eval::metrics::{prf1, ConfusionCounts};
use crate::model::FeatureMap;
use crate::{Error, Result};

pub use histogram::{score_histogram, Histogram, HistogramBin};

/// Sum of a transformed map.
pub fn anomaly_score(field: &FeatureMap) -> Result<f64> {
    if let Some(v) = field.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Precondition(format!(
            "map `{}` holds {v}; scores are defined on transformed, non-negative maps",
            field.frame_id
        )));
    }
    Ok(field.values.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRange {
    pub start_m: f64,
    pub end_m: f64,
    pub curve_ratio: f64,
    pub weight: f64,
}

impl RiskRange {
    /// Half-open `[start_m, end_m)`.
    pub fn contains(&self, position: f64) -> bool {
        self.start_m <= position && position < self.end_m
    }
}

/// Derailment-risk weight by track position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskWeightTable {
    entries: Vec<RiskRange>,
    default_weight: f64,
}

impl Default for RiskWeightTable {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            default_weight: 1.0,
        }
    }
}

impl RiskWeightTable {
    pub fn new(mut entries: Vec<RiskRange>, default_weight: f64) -> Result<Self> {
        if !(default_weight >= 0.0 && default_weight.is_finite()) {
            return Err(Error::ConfigField {
                field: "default_weight".into(),
                reason: format!("{default_weight} is not a finite non-negative weight"),
            });
        }
        for e in &entries {
            if !(e.start_m.is_finite() && e.end_m.is_finite() && e.start_m < e.end_m) {
                return Err(Error::ConfigField {
                    field: "start_m,end_m".into(),
                    reason: format!("[{}, {}) is not a valid range", e.start_m, e.end_m),
                });
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::ConfigField {
                    field: "weight".into(),
                    reason: format!("{} is not a finite non-negative weight", e.weight),
                });
            }
        }
        entries.sort_by(|a, b| a.start_m.total_cmp(&b.start_m));
        for w in entries.windows(2) {
            if w[1].start_m < w[0].end_m {
                return Err(Error::OverlappingRanges {
                    a_start: w[0].start_m,
                    a_end: w[0].end_m,
                    b_start: w[1].start_m,
                    b_end: w[1].end_m,
                });
            }
        }
        Ok(Self {
            entries,
            default_weight,
        })
    }

    pub fn entries(&self) -> &[RiskRange] {
        &self.entries
    }

    pub fn default_weight(&self) -> f64 {
        self.default_weight
    }

    /// `(weight, default used)`.
    pub fn lookup(&self, position: Option<f64>) -> (f64, bool) {
        let Some(p) = position else {
            return (self.default_weight, true);
        };
        let i = self.entries.partition_point(|e| e.start_m <= p);
        match i.checked_sub(1).map(|i| &self.entries[i]) {
            Some(e) if e.contains(p) => (e.weight, false),
            _ => (self.default_weight, true),
        }
    }

    /// Rows `start_m,end_m,curve_ratio,weight` with a header line.
    pub fn from_csv(reader: impl Read, default_weight: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<RiskRange>, _>>()?;
        Self::new(entries, default_weight)
    }

    pub fn load(path: &Path, default_weight: f64) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path).at(path)?, default_weight)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.entries.is_empty() {
            w.write_record(["start_m", "end_m", "curve_ratio", "weight"])?;
        }
        for e in &self.entries {
            w.serialize(e)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Store(e.to_string()))?).expect("csv is utf-8"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskWeighted {
    pub weight: f64,
    pub score: f64,
    pub default_used: bool,
}

pub fn risk_weighted_score(raw: f64, position: Option<f64>, table: &RiskWeightTable) -> Result<RiskWeighted> {
    if !(raw >= 0.0 && raw.is_finite()) {
        return Err(Error::Precondition(format!("raw score {raw} must be finite and non-negative")));
    }
    let (weight, default_used) = table.lookup(position);
    Ok(RiskWeighted {
        weight,
        score: weight * raw,
        default_used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub run_id: String,
    pub frame_id: String,
    pub position_m: Option<f64>,
    pub raw_score: f64,
    pub risk_weight: f64,
    pub risk_weighted_score: f64,
    pub label: Option<Label>,
    #[serde(skip)]
    pub default_weight_used: bool,
}

impl ScoredFrame {
    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Raw => self.raw_score,
            ScoreKind::RiskWeighted => self.risk_weighted_score,
        }
    }
}

/// Which score feeds thresholds, metrics and histograms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Raw,
    RiskWeighted,
}

/// Score one transformed map.
pub fn score_frame(
    run_id: &str,
    field: &FeatureMap,
    position: Option<f64>,
    label: Option<Label>,
    table: &RiskWeightTable,
) -> Result<ScoredFrame> {
    let raw = anomaly_score(field)?;
    let rw = risk_weighted_score(raw, position, table)?;
    Ok(ScoredFrame {
        run_id: run_id.to_string(),
        frame_id: field.frame_id.clone(),
        position_m: position,
        raw_score: raw,
        risk_weight: rw.weight,
        risk_weighted_score: rw.score,
        label,
        default_weight_used: rw.default_used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub selection_rule: String,
    pub calibration_run_id: String,
    /// F1 reached on the calibration scores.
    pub calibration_f1: f64,
    #[serde(default)]
    pub score_kind: ScoreKind,
}

pub const MIDPOINT_SWEEP: &str = "max_f1_midpoint_sweep";

/// Candidate thresholds: below the minimum, and every midpoint between
/// adjacent distinct scores. A score is anomalous when it exceeds the threshold.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len());
    if let Some(&min) = s.first() {
        out.push(min - 1.0);
    }
    out.extend(s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out
}

/// F1-maximising threshold over [`candidate_thresholds`]; ties go to the higher value.
pub fn best_threshold(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    require_both(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|l| l.is_anomalous()).count();
    let neg = labels.len() - pos;
    // Walk thresholds upward; everything strictly above t is predicted anomalous.
    let (mut tp, mut fp) = (pos, neg);
    let f1_of = |tp: usize, fp: usize| {
        prf1(&ConfusionCounts {
            tp,
            fp,
            tn: neg - fp,
            fn_: pos - tp,
        })
        .f1
    };
    let mut best = (scores[order[0]] - 1.0, f1_of(tp, fp));
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]].is_anomalous() {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let t = v + (scores[order[i]] - v) / 2.0;
        let f = f1_of(tp, fp);
        if f >= best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

pub(crate) fn require_both(labels: &[Label]) -> Result<()> {
    if !labels.iter().any(|l| l.is_anomalous()) {
        return Err(Error::MissingLabel { missing: "anomalous" });
    }
    if !labels.iter().any(|l| !l.is_anomalous()) {
        return Err(Error::MissingLabel { missing: "normal" });
    }
    Ok(())
}

/// Calibrate on labelled scored frames.
pub fn calibrate_threshold(scored: &[ScoredFrame], kind: ScoreKind) -> Result<Threshold> {
    let mut scores = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    for s in scored {
        let l = s
            .label
            .ok_or_else(|| Error::Precondition(format!("frame `{}` has no label", s.frame_id)))?;
        scores.push(s.score(kind));
        labels.push(l);
    }
    let (value, f1) = best_threshold(&scores, &labels)?;
    Ok(Threshold {
        value,
        selection_rule: MIDPOINT_SWEEP.into(),
        calibration_run_id: scored.first().map(|s| s.run_id.clone()).unwrap_or_default(),
        calibration_f1: f1,
        score_kind: kind,
    })
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    run_id: String,
    frame_id: String,
    position_m: Option<f64>,
    raw_score: f64,
    risk_weight: f64,
    risk_weighted_score: f64,
    label: Option<u8>,
}

/// Rows `run_id,frame_id,position_m,raw_score,risk_weight,risk_weighted_score,label`.
pub fn write_score_log(mut out: impl Write, scored: &[ScoredFrame]) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    if scored.is_empty() {
        w.write_record(["run_id", "frame_id", "position_m", "raw_score", "risk_weight", "risk_weighted_score", "label"])?;
    }
    for s in scored {
        w.serialize(ScoreRow {
            run_id: s.run_id.clone(),
            frame_id: s.frame_id.clone(),
            position_m: s.position_m,
            raw_score: s.raw_score,
            risk_weight: s.risk_weight,
            risk_weighted_score: s.risk_weighted_score,
            label: s.label.map(Label::z),
        })?;
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("<score log>"),
        source: e,
    })
}

pub fn read_score_log(reader: impl Read) -> Result<Vec<ScoredFrame>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<ScoreRow>()
        .map(|r| {
            let r = r?;
            let label = match r.label {
                Some(z) => Some(Label::from_z(z).ok_or_else(|| Error::Precondition(format!("label {z} is not 0 or 1")))?),
                None => None,
            };
            Ok(ScoredFrame {
                run_id: r.run_id,
                frame_id: r.frame_id,
                position_m: r.position_m,
                raw_score: r.raw_score,
                risk_weight: r.risk_weight,
                risk_weighted_score: r.risk_weighted_score,
                label,
                default_weight_used: false,
            })
        })
        .collect()
}
