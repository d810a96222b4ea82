//! Metrics, evaluation on the test split and the ablation grids.

pub mod metrics;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datapipe::{
    load_item, sample_imbalanced, sample_scaled, split_manifest, DatasetManifest, ImbalanceDesign, Label, ManifestItem, ScaleDesign, Split,
};
use crate::losses::pseudo_huber_map;
use crate::losses::train::{train_fcdd, TrainConfig, TrainOptions, TrainingLog};
use crate::model::{forward_maps, BackboneId, BackboneSpec, Model};
use crate::scoring::{calibrate_threshold, score_frame, RiskWeightTable, ScoreKind, ScoredFrame, Threshold};
use crate::{Error, Result};

use metrics::{auc, prf1, ConfusionCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub dataset_digest: String,
    pub samples: usize,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub score_kind: ScoreKind,
    pub counts: ConfusionCounts,
    /// A zero denominator forced precision or recall to 0.
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Metrics of labelled scored frames at a threshold.
pub fn metrics_for(scored: &[ScoredFrame], threshold: &Threshold, run_id: &str, dataset_digest: &str) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::Precondition("no frames to evaluate".into()));
    }
    let kind = threshold.score_kind;
    let mut scores = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    for s in scored {
        labels.push(s.label.ok_or_else(|| Error::Precondition(format!("frame `{}` has no label", s.frame_id)))?);
        scores.push(s.score(kind));
    }
    let counts = ConfusionCounts::at_threshold(&scores, &labels, threshold.value);
    let m = prf1(&counts);
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        dataset_digest: dataset_digest.to_string(),
        samples: scored.len(),
        auc: auc(&scores, &labels)?,
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
        threshold: threshold.value,
        score_kind: kind,
        counts,
        degenerate: m.degenerate,
    })
}

/// Score every frame of one split.
pub fn score_split(model: &Model, manifest: &DatasetManifest, split: Split, run_id: &str, table: &RiskWeightTable) -> Result<Vec<ScoredFrame>> {
    let items: Vec<&ManifestItem> = manifest.split(split).collect();
    let side = model.spec().input_side as u32;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(16) {
        let frames = chunk.iter().map(|i| load_item(i, side)).collect::<Result<Vec<_>>>()?;
        for (item, m) in chunk.iter().zip(forward_maps(model, &frames)?) {
            out.push(score_frame(run_id, &pseudo_huber_map(&m), item.position_m, Some(item.label), table)?);
        }
    }
    Ok(out)
}

/// Metrics on the test split.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    threshold: &Threshold,
    run_id: &str,
    table: &RiskWeightTable,
) -> Result<(MetricsReport, Vec<ScoredFrame>)> {
    if manifest.split(Split::Test).next().is_none() {
        return Err(Error::Precondition("test split is empty".into()));
    }
    let scored = score_split(model, manifest, Split::Test, run_id, table)?;
    Ok((metrics_for(&scored, threshold, run_id, &manifest.digest())?, scored))
}

/// Everything one train → calibrate → test pass produces.
pub struct Experiment {
    pub model: Model,
    pub log: TrainingLog,
    pub threshold: Threshold,
    pub calibration: Vec<ScoredFrame>,
    pub test: Vec<ScoredFrame>,
    pub report: MetricsReport,
}

pub struct ExperimentSetup<'a> {
    pub spec: &'a BackboneSpec,
    pub train: &'a TrainConfig,
    pub options: &'a TrainOptions,
    pub table: &'a RiskWeightTable,
    pub score_kind: ScoreKind,
    pub run_id: &'a str,
}

pub fn run_experiment(manifest: &DatasetManifest, setup: &ExperimentSetup<'_>) -> Result<Experiment> {
    for split in Split::ALL {
        if manifest.split(split).next().is_none() {
            return Err(Error::Precondition(format!("{split:?} split is empty")));
        }
    }
    let outcome = train_fcdd(manifest, setup.spec, setup.train, setup.options)?;
    let calibration = score_split(&outcome.model, manifest, Split::Calibration, setup.run_id, setup.table)?;
    let threshold = calibrate_threshold(&calibration, setup.score_kind)?;
    let (report, test) = evaluate(&outcome.model, manifest, &threshold, setup.run_id, setup.table)?;
    Ok(Experiment {
        model: outcome.model,
        log: outcome.log,
        threshold,
        calibration,
        test,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ImbalanceRatio,
    DataScale,
    Backbone,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "imbalance" | "imbalance_ratio" => Ok(AblationAxis::ImbalanceRatio),
            "scale" | "data_scale" => Ok(AblationAxis::DataScale),
            "backbone" => Ok(AblationAxis::Backbone),
            other => Err(Error::ConfigField {
                field: "axis".into(),
                reason: format!("`{other}` is not one of imbalance, scale, backbone"),
            }),
        }
    }
}

/// Inputs shared by every cell of a grid.
pub struct AblationBase {
    pub normal_pool: Vec<ManifestItem>,
    pub anomalous_pool: Vec<ManifestItem>,
    pub imbalance: ImbalanceDesign,
    pub scale: ScaleDesign,
    /// Fixed dataset for the backbone axis.
    pub dataset: Option<DatasetManifest>,
    pub spec: BackboneSpec,
    pub train: TrainConfig,
    pub options: TrainOptions,
    pub table: RiskWeightTable,
    pub score_kind: ScoreKind,
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub setting: String,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
    pub best_by_f1: Option<String>,
}

fn parse_ratio(setting: &str) -> Result<u32> {
    let head = setting.split(':').next().unwrap_or("").trim();
    head.parse().map_err(|_| Error::ConfigField {
        field: "settings".into(),
        reason: format!("`{setting}` is not a ratio like 2:1"),
    })
}

fn cell_manifest(axis: AblationAxis, setting: &str, base: &AblationBase) -> Result<(DatasetManifest, BackboneSpec)> {
    let seed = base.train.seed;
    let ratio = base.train.split_ratio;
    match axis {
        AblationAxis::ImbalanceRatio => {
            let k = parse_ratio(setting)?;
            let m = sample_imbalanced(&base.normal_pool, &base.anomalous_pool, k, base.imbalance, seed)?;
            Ok((split_manifest(&m, ratio, seed)?, base.spec.clone()))
        }
        AblationAxis::DataScale => {
            let s: u32 = setting.trim().parse().map_err(|_| Error::ConfigField {
                field: "settings".into(),
                reason: format!("`{setting}` is not a scale step"),
            })?;
            let m = sample_scaled(&base.normal_pool, &base.anomalous_pool, s, base.scale, seed)?;
            Ok((split_manifest(&m, ratio, seed)?, base.spec.clone()))
        }
        AblationAxis::Backbone => {
            let id: BackboneId = setting.parse()?;
            let data = base
                .dataset
                .as_ref()
                .ok_or_else(|| Error::Precondition("the backbone axis needs a dataset".into()))?;
            let data = if data.items.iter().all(|i| i.split.is_some()) {
                data.clone()
            } else {
                split_manifest(data, ratio, seed)?
            };
            let mut spec = BackboneSpec::new(id);
            spec.input_side = base.spec.input_side;
            spec.output_rows = base.spec.output_rows;
            spec.output_cols = base.spec.output_cols;
            spec.trunk_policy = base.spec.trunk_policy;
            spec.head = base.spec.head.clone();
            Ok((data, spec))
        }
    }
}

fn display_setting(axis: AblationAxis, setting: &str) -> String {
    match axis {
        AblationAxis::ImbalanceRatio => match parse_ratio(setting) {
            Ok(k) => format!("{k}:1"),
            Err(_) => setting.to_string(),
        },
        AblationAxis::DataScale => setting.trim().to_string(),
        AblationAxis::Backbone => setting.parse::<BackboneId>().map_or_else(|_| setting.to_string(), |b| b.to_string()),
    }
}

/// Train and evaluate one model per setting with the same seed. Failed cells
/// are recorded and the grid still completes.
pub fn run_ablation(axis: AblationAxis, settings: &[String], base: &AblationBase) -> Result<AblationGrid> {
    if settings.is_empty() {
        return Err(Error::Precondition("ablation needs at least one setting".into()));
    }
    let mut cells = Vec::with_capacity(settings.len());
    for setting in settings {
        let label = display_setting(axis, setting);
        let result = cell_manifest(axis, setting, base).and_then(|(manifest, spec)| {
            let run_id = format!("{}/{}", base.run_id, label);
            let setup = ExperimentSetup {
                spec: &spec,
                train: &base.train,
                options: &base.options,
                table: &base.table,
                score_kind: base.score_kind,
                run_id: &run_id,
            };
            run_experiment(&manifest, &setup).map(|e| e.report)
        });
        cells.push(match result {
            Ok(r) => AblationCell {
                setting: label,
                report: Some(r),
                error: None,
            },
            Err(e) => AblationCell {
                setting: label,
                report: None,
                error: Some(e.to_string()),
            },
        });
    }
    let best_by_f1 = best_by_f1(&cells);
    Ok(AblationGrid { axis, cells, best_by_f1 })
}

/// Highest F1, ties broken by AUC, then by order.
pub fn best_by_f1(cells: &[AblationCell]) -> Option<String> {
    let mut best: Option<(&str, f64, f64)> = None;
    for c in cells {
        if let Some(r) = &c.report {
            let better = match best {
                None => true,
                Some((_, f1, a)) => r.f1 > f1 || (r.f1 == f1 && r.auc > a),
            };
            if better {
                best = Some((&c.setting, r.f1, r.auc));
            }
        }
    }
    best.map(|b| b.0.to_string())
}

const COLUMNS: [&str; 5] = ["setting", "AUC", "F1", "Precision", "Recall"];

impl AblationGrid {
    fn rows(&self) -> Vec<[String; 5]> {
        self.cells
            .iter()
            .map(|c| match &c.report {
                Some(r) => [
                    c.setting.clone(),
                    format!("{:.4}", r.auc),
                    format!("{:.4}", r.f1),
                    format!("{:.4}", r.precision),
                    format!("{:.4}", r.recall),
                ],
                None => [c.setting.clone(), "failed".into(), "failed".into(), "failed".into(), "failed".into()],
            })
            .collect()
    }

    /// Aligned plain-text table; the best row is marked with `*`.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let mut width = COLUMNS.map(str::len);
        for r in &rows {
            for (w, cell) in width.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String; 5], mark: bool| {
            let _ = write!(out, "{} {:<w$}", if mark { '*' } else { ' ' }, cells[0], w = width[0]);
            for (c, w) in cells[1..].iter().zip(&width[1..]) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        };
        line(&mut out, &COLUMNS.map(String::from), false);
        for (r, c) in rows.iter().zip(&self.cells) {
            line(&mut out, r, self.best_by_f1.as_deref() == Some(c.setting.as_str()));
        }
        for c in &self.cells {
            if let Some(e) = &c.error {
                let _ = writeln!(out, "! {}: {e}", c.setting);
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in self.rows() {
            w.write_record(&r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Store(e.to_string()))?).expect("utf-8"))
    }
}

/// Rows of an emitted ablation CSV: `(setting, AUC, F1, Precision, Recall)`;
/// failed cells have no metrics.
pub fn read_table_csv(text: &str) -> Result<Vec<(String, Option<[f64; 4]>)>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|r| {
            let r = r?;
            let vals: Option<Vec<f64>> = (1..5).map(|i| r.get(i).and_then(|v| v.parse().ok())).collect();
            Ok((r.get(0).unwrap_or("").to_string(), vals.map(|v| [v[0], v[1], v[2], v[3]])))
        })
        .collect()
}

pub fn labels_of(scored: &[ScoredFrame]) -> Vec<Label> {
    scored.iter().filter_map(|s| s.label).collect()
}
