//! Mini-batch training of a backbone under the FCDD loss.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{fcdd_backward, pseudo_huber};
use crate::datapipe::{load_item, DatasetManifest, Frame, Label, Split};
use crate::error::IoContext;
use crate::eval::metrics::auc;
use crate::model::{build_backbone_with, frame_tensor, BackboneRegistry, BackboneSpec, Model, ModelWeights, PretrainedSources};
use crate::nn::{Adam, AdamConfig, Param, Tensor};
use crate::scoring::best_threshold;
use crate::{Error, Result};

fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    30
}
fn d_lr() -> f64 {
    1e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-8
}
fn d_split() -> [u32; 3] {
    [65, 15, 20]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub gradient_decay: f64,
    #[serde(default = "d_beta2")]
    pub squared_gradient_decay: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_split")]
    pub split_ratio: [u32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: d_batch(),
            epochs: d_epochs(),
            learning_rate: d_lr(),
            gradient_decay: d_beta1(),
            squared_gradient_decay: d_beta2(),
            epsilon: d_eps(),
            seed: 0,
            split_ratio: d_split(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::ConfigField {
            field: field.into(),
            reason,
        });
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gradient_decay", self.gradient_decay),
            ("squared_gradient_decay", self.squared_gradient_decay),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(name, format!("{v} is outside (0, 1)"));
            }
        }
        if self.split_ratio.iter().any(|&r| r == 0) || self.split_ratio.iter().sum::<u32>() != 100 {
            return bad("split_ratio", format!("{:?} must be positive and sum to 100", self.split_ratio));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.gradient_decay,
            beta2: self.squared_gradient_decay,
            epsilon: self.epsilon,
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub calib_auc: Option<f64>,
    pub calib_f1: Option<f64>,
    /// Anomalous samples whose log term was clamped during the epoch.
    pub saturated: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub optimizer: OptimizerRecord,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        self.optimizer == other.optimizer
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.calib_auc.map(f64::to_bits) == b.calib_auc.map(f64::to_bits)
                    && a.calib_f1.map(f64::to_bits) == b.calib_f1.map(f64::to_bits)
                    && a.saturated == b.saturated
            })
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({ "optimizer": self.optimizer }))?;
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| Error::Config("empty training log".into()))?)?;
        let optimizer = serde_json::from_value(head["optimizer"].clone())?;
        let epochs = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { optimizer, epochs })
    }
}

/// Centred moving average with a shrinking window at the ends.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone)]
pub struct TrainOptions {
    pub sources: PretrainedSources,
    pub registry: BackboneRegistry,
    /// Epoch records are appended here as training proceeds.
    pub log_path: Option<PathBuf>,
    pub progress: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sources: PretrainedSources::default(),
            registry: BackboneRegistry::default(),
            log_path: None,
            progress: false,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

impl TrainOutcome {
    pub fn weights(&self) -> ModelWeights {
        self.model.to_weights()
    }
}

pub(crate) fn load_split(manifest: &DatasetManifest, split: Split, side: usize) -> Result<Vec<(Frame, Label)>> {
    manifest
        .split(split)
        .map(|item| Ok((load_item(item, side as u32)?, item.label)))
        .collect()
}

/// Train on the train split of `manifest`, logging calibration metrics per epoch.
pub fn train_fcdd(manifest: &DatasetManifest, spec: &BackboneSpec, tc: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    tc.validate()?;
    let train = load_split(manifest, Split::Train, spec.input_side)?;
    let calib = load_split(manifest, Split::Calibration, spec.input_side)?;
    train_on_frames(&train, &calib, spec, tc, opts)
}

fn calibration_metrics(model: &Model, frames: &[(Frame, Label)]) -> Result<(Option<f64>, Option<f64>)> {
    if frames.is_empty() {
        return Ok((None, None));
    }
    let scores = raw_scores(model, frames.iter().map(|(f, _)| f))?;
    let labels: Vec<Label> = frames.iter().map(|(_, l)| *l).collect();
    match (auc(&scores, &labels), best_threshold(&scores, &labels)) {
        (Ok(a), Ok((_, f1))) => Ok((Some(a), Some(f1))),
        _ => Ok((None, None)),
    }
}

/// Sum of the transformed map for each frame, evaluated in batches.
pub fn raw_scores<'a>(model: &Model, frames: impl Iterator<Item = &'a Frame>) -> Result<Vec<f64>> {
    let frames: Vec<&Frame> = frames.collect();
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(16) {
        let x = Tensor::stack(&chunk.iter().map(|f| frame_tensor(f)).collect::<Vec<_>>());
        let y = model.forward(&x)?;
        for i in 0..chunk.len() {
            let s = y.sample(i);
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("non-finite output for `{}`", chunk[i].frame_id)));
            }
            out.push(s.iter().map(|&u| pseudo_huber(u as f64)).sum());
        }
    }
    Ok(out)
}

pub fn train_on_frames(
    train: &[(Frame, Label)],
    calib: &[(Frame, Label)],
    spec: &BackboneSpec,
    tc: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("train partition is empty".into()));
    }
    let weights = build_backbone_with(spec, tc.seed, &opts.sources, &opts.registry)?;
    let mut model = Model::from_weights_with(&weights, &opts.registry)?;
    model.set_training_config_digest(tc.digest());
    let adam_cfg = tc.adam();
    let mut opt = Adam::new(adam_cfg);
    let log_header = OptimizerRecord {
        name: "adam".into(),
        learning_rate: adam_cfg.learning_rate,
        beta1: adam_cfg.beta1,
        beta2: adam_cfg.beta2,
        epsilon: adam_cfg.epsilon,
        weight_decay: 0.0,
    };
    let mut log = TrainingLog {
        optimizer: log_header,
        epochs: Vec::new(),
    };
    let mut log_file = match &opts.log_path {
        Some(p) => {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p).at(p)?;
            writeln!(f, "{}", serde_json::json!({ "optimizer": log.optimizer })).at(p)?;
            Some((f, p.clone()))
        }
        None => None,
    };

    let cells = spec.output_rows * spec.output_cols;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_ba7c4);
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut saturated) = (0.0, 0usize, 0usize);
        for (bi, batch) in order.chunks(tc.batch_size).enumerate() {
            let x = Tensor::stack(&batch.iter().map(|&i| frame_tensor(&train[i].0)).collect::<Vec<_>>());
            let labels: Vec<Label> = batch.iter().map(|&i| train[i].1).collect();
            let y = model.forward_train(&x)?;
            let (loss, grad, sat) = fcdd_backward(&y.data, &labels, cells);
            if !loss.is_finite() || !y.all_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            model.backward(&Tensor::from_vec(y.n, y.c, y.h, y.w, grad));
            let mut params: Vec<&mut Param> = model.params_mut().into_iter().filter(|p| p.wants_grad()).collect();
            opt.step(&mut params);
            model.clear_cache();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            saturated += sat;
        }
        let (calib_auc, calib_f1) = calibration_metrics(&model, calib)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            calib_auc,
            calib_f1,
            saturated,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if opts.progress {
            eprintln!(
                "epoch {:>3}  loss {:.5}  calib auc {}  f1 {}  ({:.1}s)",
                record.epoch,
                record.train_loss,
                fmt_opt(record.calib_auc),
                fmt_opt(record.calib_f1),
                record.wall_seconds
            );
        }
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&record)?).at(p.as_path())?;
        }
        log.epochs.push(record);
    }
    Ok(TrainOutcome { model, log })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Write a log as JSON lines.
pub fn save_log(log: &TrainingLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_jsonl()?).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{render_sample, Stage, SyntheticSpec};

    fn tiny_data(n: usize, a: usize) -> Vec<(Frame, Label)> {
        let spec = SyntheticSpec {
            width: 32,
            height: 32,
            defect: crate::datapipe::synth::DefectModel {
                radius: (3.0, 5.0),
                ..Default::default()
            },
            normal_count: n,
            anomalous_count: a,
            seed: 4,
            ..Default::default()
        };
        let mut out = Vec::new();
        for (label, count) in [(Label::Normal, n), (Label::Anomalous, a)] {
            for i in 0..count {
                let s = render_sample(&spec, label, i);
                out.push((Frame::new(s.frame_id, s.image, Stage::Resized), label));
            }
        }
        out
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 3,
            learning_rate: 1e-3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_and_validation() {
        let tc = TrainConfig::default();
        assert_eq!((tc.batch_size, tc.epochs, tc.learning_rate), (32, 30, 1e-4));
        assert_eq!((tc.gradient_decay, tc.squared_gradient_decay, tc.split_ratio), (0.9, 0.99, [65, 15, 20]));
        tc.validate().unwrap();
        let zero = TrainConfig { epochs: 0, ..tc.clone() };
        assert!(matches!(zero.validate(), Err(Error::ConfigField { field, .. }) if field == "epochs"));
        let bad_split = TrainConfig { split_ratio: [60, 15, 20], ..tc };
        assert!(bad_split.validate().is_err());
    }

    #[test]
    fn same_seed_same_log_and_weights() {
        let data = tiny_data(12, 6);
        let (train, calib) = data.split_at(14);
        let spec = BackboneSpec::cnn27().with_input_side(32);
        let opts = TrainOptions::default();
        let a = train_on_frames(train, calib, &spec, &quick(), &opts).unwrap();
        let b = train_on_frames(train, calib, &spec, &quick(), &opts).unwrap();
        assert!(a.log.same_trajectory(&b.log));
        assert_eq!(a.weights().digest(), b.weights().digest());
        assert_eq!(a.log.epochs.len(), 3);
        assert!(a.log.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn log_file_is_appended_per_epoch() {
        let data = tiny_data(6, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.jsonl");
        let opts = TrainOptions {
            log_path: Some(path.clone()),
            ..Default::default()
        };
        let out = train_on_frames(&data, &[], &BackboneSpec::cnn27().with_input_side(32), &quick(), &opts).unwrap();
        let parsed = TrainingLog::from_jsonl(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed, out.log);
        assert!(parsed.epochs.iter().all(|e| e.calib_auc.is_none()));
    }

    #[test]
    fn empty_partition_is_rejected() {
        let err = train_on_frames(&[], &[], &BackboneSpec::cnn27().with_input_side(32), &quick(), &TrainOptions::default());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0, 5.0], 3), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
    }
}
