//! Three-way scene classifiers used to partition frames before sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, SceneLabel, ShadowClass, SurfaceClass};
use crate::error::IoContext;
use crate::model::{frame_tensor, BackboneSpec, Model, ModelWeights, PretrainedSources, TrunkPolicy};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Adam, AdamConfig, Param, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTask {
    Shadow,
    Surface,
}

impl SceneTask {
    pub fn class_names(self) -> [&'static str; 3] {
        match self {
            SceneTask::Shadow => ["shadow", "whole_dark", "without_shadow"],
            SceneTask::Surface => ["grassy", "decayed_sleeper", "normal_no_grass"],
        }
    }

    pub fn class_index(self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|n| *n == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub trunk_policy: TrunkPolicy,
    /// Percentage of each class held out for the reported accuracy.
    pub test_percent: u32,
    pub seed: u64,
}

impl Default for SceneTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 15,
            learning_rate: 1e-3,
            trunk_policy: TrunkPolicy::FineTune,
            test_percent: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Head {
    task: SceneTask,
    channels: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
    test_accuracy: f64,
}

/// Trunk features, global average pooling and a linear softmax head.
pub struct SceneClassifier {
    model: Model,
    head: Head,
}

impl SceneClassifier {
    pub fn task(&self) -> SceneTask {
        self.head.task
    }

    pub fn test_accuracy(&self) -> f64 {
        self.head.test_accuracy
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.model.spec()
    }

    fn logits(&self, pooled: &[f32], out: &mut [f32; 3]) {
        let c = self.head.channels;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.head.weight[k * c..(k + 1) * c];
            *o = self.head.bias[k] + row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f32>();
        }
    }

    /// Class index and softmax confidence for each frame.
    pub fn predict(&self, frames: &[Frame]) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(16) {
            let x = Tensor::stack(&chunk.iter().map(frame_tensor).collect::<Vec<_>>());
            let pooled = global_avg_pool(&self.model.features(&x)?);
            for feat in &pooled {
                let mut z = [0f32; 3];
                self.logits(feat, &mut z);
                let p = softmax(&z);
                let (k, conf) = p.iter().copied().enumerate().fold((0, f64::MIN), |b, (k, v)| if v > b.1 { (k, v) } else { b });
                out.push((k, conf));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.to_weights().save(path)?;
        let head = path.with_extension("head.json");
        std::fs::write(&head, serde_json::to_vec(&self.head)?).at(&head)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model = Model::from_weights(&ModelWeights::load(path)?)?;
        let head_path = path.with_extension("head.json");
        let head: Head = serde_json::from_slice(&std::fs::read(&head_path).at(&head_path)?)?;
        if head.channels != model.trunk_channels() || head.weight.len() != 3 * head.channels || head.bias.len() != 3 {
            return Err(Error::WeightFile(format!("{} does not match its trunk", head_path.display())));
        }
        Ok(Self { model, head })
    }
}

fn softmax(z: &[f32; 3]) -> [f64; 3] {
    let m = z.iter().copied().fold(f32::MIN, f32::max) as f64;
    let e = z.map(|v| (v as f64 - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Train a classifier on `(frame, class index)` pairs. Every class needs at
/// least two examples so that one can be held out.
pub fn scene_filter_train(
    labeled: &[(Frame, usize)],
    task: SceneTask,
    spec: &BackboneSpec,
    cfg: &SceneTrainConfig,
    sources: &PretrainedSources,
) -> Result<SceneClassifier> {
    let names = task.class_names();
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, (_, k)) in labeled.iter().enumerate() {
        let list = by_class.get_mut(*k).ok_or_else(|| Error::Precondition(format!("class index {k} out of range")))?;
        list.push(i);
    }
    for (k, list) in by_class.iter().enumerate() {
        if list.len() < 2 {
            return Err(Error::Precondition(format!(
                "missing class `{}`: {} examples, need at least 2",
                names[k],
                list.len()
            )));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for list in by_class.iter_mut() {
        list.shuffle(&mut rng);
        let held = ((list.len() as u64 * cfg.test_percent as u64).div_ceil(100) as usize).clamp(1, list.len() - 1);
        test.extend_from_slice(&list[..held]);
        train.extend_from_slice(&list[held..]);
    }

    let mut spec = spec.clone();
    spec.trunk_policy = cfg.trunk_policy;
    let weights = crate::model::build_backbone(&spec, cfg.seed, sources)?;
    let mut model = Model::from_weights(&weights)?;
    model.apply_trunk_policy(cfg.trunk_policy);
    let c = model.trunk_channels();
    let mut head_w = Param::weight("scene.weight", vec![3, c], vec![0.0; 3 * c]);
    let mut head_b = Param::weight("scene.bias", vec![3], vec![0.0; 3]);
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let frozen = cfg.trunk_policy == TrunkPolicy::Freeze;
    // With a frozen trunk the pooled features never change.
    let cached: Option<Vec<Vec<f32>>> = if frozen {
        let mut feats = Vec::with_capacity(labeled.len());
        for chunk in labeled.chunks(16) {
            let x = Tensor::stack(&chunk.iter().map(|(f, _)| frame_tensor(f)).collect::<Vec<_>>());
            feats.extend(global_avg_pool(&model.features(&x)?));
        }
        Some(feats)
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for (bi, batch) in train.chunks(cfg.batch_size).enumerate() {
            let n = batch.len();
            let (pooled, feat_shape) = match &cached {
                Some(feats) => (batch.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>(), None),
                None => {
                    let x = Tensor::stack(&batch.iter().map(|&i| frame_tensor(&labeled[i].0)).collect::<Vec<_>>());
                    let f = model.features_train(&x)?;
                    let shape = (f.h, f.w);
                    (global_avg_pool(&f), Some(shape))
                }
            };
            let mut dpooled = vec![vec![0f32; c]; n];
            let mut loss = 0.0f64;
            for (j, &i) in batch.iter().enumerate() {
                let feat = &pooled[j];
                let mut z = [0f32; 3];
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = head_b.value[k] + head_w.value[k * c..(k + 1) * c].iter().zip(feat).map(|(a, b)| a * b).sum::<f32>();
                }
                let p = softmax(&z);
                let target = labeled[i].1;
                loss -= p[target].max(1e-12).ln();
                let dz = &mut dpooled[j];
                for k in 0..3 {
                    let g = ((p[k] - if k == target { 1.0 } else { 0.0 }) / n as f64) as f32;
                    head_b.grad[k] += g;
                    for ch in 0..c {
                        head_w.grad[k * c + ch] += g * feat[ch];
                        dz[ch] += g * head_w.value[k * c + ch];
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            if let Some((h, w)) = feat_shape {
                model.features_backward(&global_avg_pool_backward(&dpooled, c, h, w));
            }
            let mut params: Vec<&mut Param> = vec![&mut head_w, &mut head_b];
            if !frozen {
                params.extend(model.trunk_params_mut().into_iter().filter(|p| p.wants_grad()));
            }
            opt.step(&mut params);
            model.clear_cache();
        }
    }

    let mut clf = SceneClassifier {
        model,
        head: Head {
            task,
            channels: c,
            weight: head_w.value,
            bias: head_b.value,
            test_accuracy: 0.0,
        },
    };
    let test_frames: Vec<Frame> = test.iter().map(|&i| labeled[i].0.clone()).collect();
    let preds = clf.predict(&test_frames)?;
    let correct = preds.iter().zip(&test).filter(|((k, _), &i)| *k == labeled[i].1).count();
    clf.head.test_accuracy = correct as f64 / test.len() as f64;
    Ok(clf)
}

/// Per-class totals and frames that could not be classified.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub counts: [usize; 3],
    pub failures: Vec<(String, String)>,
}

/// Annotate every frame with the classifier's label.
pub fn scene_filter_apply(clf: &SceneClassifier, frames: Vec<Frame>) -> (Vec<Frame>, PartitionReport) {
    let mut report = PartitionReport::default();
    let side = clf.spec().input_side as u32;
    let mut out = Vec::with_capacity(frames.len());
    for mut f in frames {
        if f.pixels.dimensions() != (side, side) {
            report.failures.push((f.frame_id.clone(), format!("expected a {side}² frame")));
            out.push(f);
            continue;
        }
        match clf.predict(std::slice::from_ref(&f)) {
            Ok(p) => {
                let (k, conf) = p[0];
                report.counts[k] += 1;
                let label = f.scene_labels.get_or_insert_with(SceneLabel::default);
                match clf.task() {
                    SceneTask::Shadow => label.shadow = Some((ShadowClass::ALL[k], conf)),
                    SceneTask::Surface => label.surface = Some((SurfaceClass::ALL[k], conf)),
                }
            }
            Err(e) => report.failures.push((f.frame_id.clone(), e.to_string())),
        }
        out.push(f);
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Stage;
    use image::{Rgb, RgbImage};
    use rand::Rng;

    fn colored(n_per: usize, seed: u64) -> Vec<(Frame, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = [[200u8, 30, 30], [30, 200, 30], [30, 30, 200]];
        let mut out = Vec::new();
        for (k, b) in bases.iter().enumerate() {
            for i in 0..n_per {
                let img = RgbImage::from_fn(32, 32, |_, _| Rgb(b.map(|v| v.saturating_add(rng.random_range(0..25)))));
                out.push((Frame::new(format!("{k}-{i}"), img, Stage::Resized), k));
            }
        }
        out
    }

    fn spec() -> BackboneSpec {
        BackboneSpec::cnn27().with_input_side(32)
    }

    fn cfg() -> SceneTrainConfig {
        SceneTrainConfig {
            batch_size: 8,
            epochs: 40,
            learning_rate: 1e-2,
            trunk_policy: TrunkPolicy::Freeze,
            test_percent: 20,
            seed: 3,
        }
    }

    #[test]
    fn separable_colors_are_learned() {
        let sources = PretrainedSources::in_dir(std::env::temp_dir());
        let clf = scene_filter_train(&colored(20, 1), SceneTask::Shadow, &spec(), &cfg(), &sources).unwrap();
        assert!(clf.test_accuracy() >= 0.99, "accuracy {}", clf.test_accuracy());

        let frames: Vec<Frame> = colored(4, 2).into_iter().map(|(f, _)| f).collect();
        let (annotated, report) = scene_filter_apply(&clf, frames.clone());
        assert_eq!(report.counts.iter().sum::<usize>(), frames.len());
        assert!(annotated.iter().all(|f| f.scene_labels.as_ref().unwrap().shadow.is_some()));
        let (again, _) = scene_filter_apply(&clf, frames);
        assert_eq!(annotated, again);
        assert!(scene_filter_apply(&clf, Vec::new()).0.is_empty());
    }

    #[test]
    fn single_class_is_rejected() {
        let sources = PretrainedSources::in_dir(std::env::temp_dir());
        let only_red: Vec<(Frame, usize)> = colored(5, 1).into_iter().filter(|(_, k)| *k == 0).collect();
        let err = scene_filter_train(&only_red, SceneTask::Surface, &spec(), &cfg(), &sources).err().unwrap();
        assert!(err.to_string().contains("missing class"));
    }

    #[test]
    fn classifier_round_trips() {
        let sources = PretrainedSources::in_dir(std::env::temp_dir());
        let mut c = cfg();
        c.epochs = 2;
        c.trunk_policy = TrunkPolicy::FineTune;
        let clf = scene_filter_train(&colored(4, 1), SceneTask::Surface, &spec(), &c, &sources).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.weights");
        clf.save(&path).unwrap();
        let back = SceneClassifier::load(&path).unwrap();
        let frames: Vec<Frame> = colored(2, 5).into_iter().map(|(f, _)| f).collect();
        assert_eq!(clf.predict(&frames).unwrap(), back.predict(&frames).unwrap());
    }
}
