//! Backbone mapping from a frame to a single-channel receptive-field map.
//!
//! The baseline is the 27-layer fully convolutional `CNN27`. Deeper variants
//! truncate a pretrained VGG16, ResNet101 or InceptionV3 trunk at the last
//! layer that still resolves the target grid, conform the grid with one
//! strided convolution when needed, and finish with a fresh 1×1 projection.

pub mod backbones;
pub mod plan;
pub mod pretrained;
pub mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Frame, Stage};
use crate::nn::{Layer, Param, Sequential, Tensor};
use crate::{Error, Result};

use plan::{Activation, ConvPlan, LayerPlan, Plan};
pub use pretrained::PretrainedSources;
pub use weights::{ModelWeights, NamedTensor};

/// Per-channel normalization applied to RGB input in `[0, 1]`.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneId {
    Cnn27,
    Vgg16,
    ResNet101,
    InceptionV3,
    Custom(String),
}

impl BackboneId {
    pub fn is_pretrained_variant(&self) -> bool {
        !matches!(self, BackboneId::Cnn27)
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneId::Cnn27 => f.write_str("CNN27"),
            BackboneId::Vgg16 => f.write_str("VGG16"),
            BackboneId::ResNet101 => f.write_str("ResNet101"),
            BackboneId::InceptionV3 => f.write_str("InceptionV3"),
            BackboneId::Custom(name) => f.write_str(name),
        }
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::UnknownBackbone(String::new()));
        }
        Ok(match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "cnn27" => BackboneId::Cnn27,
            "vgg16" => BackboneId::Vgg16,
            "resnet101" => BackboneId::ResNet101,
            "inceptionv3" => BackboneId::InceptionV3,
            _ => BackboneId::Custom(s.to_string()),
        })
    }
}

impl Serialize for BackboneId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackboneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether pretrained trunk weights are updated during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkPolicy {
    #[default]
    FineTune,
    Freeze,
}

/// Final 1×1 projection to one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub bias: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { bias: true }
    }
}

fn default_side() -> usize {
    224
}
fn default_field() -> usize {
    28
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    #[serde(default = "default_side")]
    pub input_side: usize,
    #[serde(default = "default_field")]
    pub output_rows: usize,
    #[serde(default = "default_field")]
    pub output_cols: usize,
    /// Named trunk layer to cut after; resolved by the 28×28 rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_point: Option<String>,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub trunk_policy: TrunkPolicy,
}

impl BackboneSpec {
    pub fn new(id: BackboneId) -> Self {
        Self {
            id,
            input_side: default_side(),
            output_rows: default_field(),
            output_cols: default_field(),
            truncation_point: None,
            head: HeadSpec::default(),
            trunk_policy: TrunkPolicy::default(),
        }
    }

    pub fn cnn27() -> Self {
        Self::new(BackboneId::Cnn27)
    }

    /// Same backbone at a different input side, keeping the stride.
    pub fn with_input_side(mut self, side: usize) -> Self {
        let stride = self.input_side / self.output_rows.max(1);
        self.input_side = side;
        self.output_rows = side / stride.max(1);
        self.output_cols = side / stride.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_rows == 0 || self.output_cols == 0 {
            return Err(Error::Config("output grid must be at least 1×1".into()));
        }
        if self.input_side == 0 {
            return Err(Error::Config("input side must be positive".into()));
        }
        if self.input_side % self.output_rows != 0 || self.input_side % self.output_cols != 0 {
            return Err(Error::Config(format!(
                "input side {} is not an integral multiple of the {}×{} output grid",
                self.input_side, self.output_rows, self.output_cols
            )));
        }
        if self.input_side / self.output_rows != self.input_side / self.output_cols {
            return Err(Error::Config("row and column strides differ".into()));
        }
        if self.id == BackboneId::Cnn27 {
            if self.truncation_point.is_some() {
                return Err(Error::Config("CNN27 has no truncation point".into()));
            }
            if self.input_side / self.output_rows != 8 {
                return Err(Error::Config(format!(
                    "CNN27 has total stride 8; {}→{} is not supported",
                    self.input_side, self.output_rows
                )));
            }
        }
        Ok(())
    }
}

/// Input-space placement of the output grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveFieldGeometry {
    pub total_stride: usize,
    pub field_extent: usize,
    pub offset: f64,
}

impl ReceptiveFieldGeometry {
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.offset + (row * self.total_stride) as f64,
            self.offset + (col * self.total_stride) as f64,
        )
    }

    /// Whether every cell center of a `rows×cols` grid lies on an `h×w` canvas.
    pub fn fits(&self, rows: usize, cols: usize, h: usize, w: usize) -> bool {
        if rows == 0 || cols == 0 {
            return true;
        }
        let (cy, cx) = self.center(rows - 1, cols - 1);
        self.offset >= 0.0 && cy < h as f64 && cx < w as f64
    }
}

/// Single-channel map emitted by the backbone for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub frame_id: String,
    pub backbone_id: BackboneId,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "feature map size");
        Self {
            rows,
            cols,
            values,
            frame_id: String::new(),
            backbone_id: BackboneId::Cnn27,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

type PlanFn = Arc<dyn Fn() -> Plan + Send + Sync>;

/// Trunk plans by id. Custom ids must be registered before use.
#[derive(Clone)]
pub struct BackboneRegistry {
    custom: BTreeMap<String, (PlanFn, bool)>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = Self { custom: BTreeMap::new() };
        r.register("ResNet18", true, backbones::resnet18_trunk);
        r
    }
}

impl BackboneRegistry {
    /// Register a custom trunk. `pretrained` trunks load weights from the cache.
    pub fn register(&mut self, name: &str, pretrained: bool, plan: impl Fn() -> Plan + Send + Sync + 'static) {
        self.custom.insert(name.to_string(), (Arc::new(plan), pretrained));
    }

    /// `(trunk plan, needs pretrained weights)`.
    pub fn trunk(&self, id: &BackboneId) -> Result<(Plan, bool)> {
        Ok(match id {
            BackboneId::Cnn27 => (backbones::cnn27_trunk(), false),
            BackboneId::Vgg16 => (backbones::vgg16_trunk(), true),
            BackboneId::ResNet101 => (backbones::resnet101_trunk(), true),
            BackboneId::InceptionV3 => (backbones::inception_v3_trunk(), true),
            BackboneId::Custom(name) => {
                let (f, pretrained) = self.custom.get(name).ok_or_else(|| Error::UnknownBackbone(name.clone()))?;
                (f(), *pretrained)
            }
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["CNN27", "VGG16", "ResNet101", "InceptionV3"].iter().map(|s| s.to_string()).collect();
        v.extend(self.custom.keys().cloned());
        v
    }
}

/// Resolved trunk and head plans for a spec.
pub struct Architecture {
    pub trunk: Plan,
    pub head: Plan,
    pub trunk_channels: usize,
    pub truncation_point: Option<String>,
    pub pretrained: bool,
}

pub fn architecture(spec: &BackboneSpec, registry: &BackboneRegistry) -> Result<Architecture> {
    spec.validate()?;
    let (mut trunk, pretrained) = registry.trunk(&spec.id)?;
    let (rows, cols) = (spec.output_rows, spec.output_cols);
    let truncation_point = if spec.id == BackboneId::Cnn27 {
        None
    } else {
        let point = match &spec.truncation_point {
            Some(p) => p.clone(),
            None => backbones::truncation_rule(&trunk, spec.input_side, rows, cols).ok_or_else(|| {
                Error::Config(format!("{} never resolves a {rows}×{cols} grid from {}²", spec.id, spec.input_side))
            })?,
        };
        if !trunk.truncate_after(&point) {
            return Err(Error::Config(format!("{} has no layer named `{point}`", spec.id)));
        }
        Some(point)
    };
    let (c, h, w) = trunk
        .output_dims(3, spec.input_side, spec.input_side)
        .ok_or_else(|| Error::Config(format!("input {}² too small for {}", spec.input_side, spec.id)))?;
    let mut head = Plan::default();
    let mut head_in = c;
    if (h, w) != (rows, cols) {
        if h < rows || w < cols {
            return Err(Error::Config(format!("trunk resolves {h}×{w}, below the {rows}×{cols} target")));
        }
        let (k, s, p) = backbones::conform_conv(h, rows)
            .filter(|&(k, s, p)| (w + 2 * p - k) / s + 1 == cols)
            .ok_or_else(|| Error::Config(format!("no strided convolution maps {h}×{w} onto {rows}×{cols}")))?;
        head.push(
            "conform",
            LayerPlan::ConvBnAct {
                conv: ConvPlan::square(c, c, k, s, p, false),
                eps: 1e-5,
                act: Activation::Relu,
            },
        );
        head_in = c;
    }
    let mut proj = ConvPlan::square(head_in, 1, 1, 1, 0, spec.head.bias);
    proj.gain = 1.0;
    head.push("proj", LayerPlan::Conv(proj));
    let head_out = head.output_dims(c, h, w);
    if head_out != Some((1, rows, cols)) {
        return Err(Error::Config(format!("head emits {head_out:?}, expected (1, {rows}, {cols})")));
    }
    Ok(Architecture {
        trunk,
        head,
        trunk_channels: c,
        truncation_point,
        pretrained,
    })
}

pub fn geometry_of(spec: &BackboneSpec) -> Result<ReceptiveFieldGeometry> {
    geometry_with(spec, &BackboneRegistry::default())
}

pub fn geometry_with(spec: &BackboneSpec, registry: &BackboneRegistry) -> Result<ReceptiveFieldGeometry> {
    if spec.output_rows == 0 || spec.input_side % spec.output_rows != 0 || spec.input_side % spec.output_cols.max(1) != 0 {
        return Err(Error::Config(format!(
            "stride {}/{} is not integral",
            spec.input_side, spec.output_rows
        )));
    }
    let total_stride = spec.input_side / spec.output_rows;
    let field_extent = match architecture(spec, registry) {
        Ok(arch) => {
            let (te, ts) = arch.trunk.field();
            let (he, _) = arch.head.field();
            te + (he - 1) * ts
        }
        // Unregistered trunks still have a well-defined placement.
        Err(Error::UnknownBackbone(_)) | Err(Error::PretrainedUnavailable { .. }) => total_stride,
        Err(e) => return Err(e),
    };
    Ok(ReceptiveFieldGeometry {
        total_stride,
        field_extent,
        offset: total_stride as f64 / 2.0,
    })
}

/// A backbone ready for inference or training.
pub struct Model {
    spec: BackboneSpec,
    trunk: Sequential,
    head: Sequential,
    trunk_channels: usize,
    seed: u64,
    training_config_digest: String,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

fn head_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Model {
    /// Randomly initialised architecture; pretrained trunks are not loaded.
    pub fn random(spec: &BackboneSpec, seed: u64, registry: &BackboneRegistry) -> Result<(Self, bool)> {
        let arch = architecture(spec, registry)?;
        let mut trunk_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed(seed));
        let mut resolved = spec.clone();
        resolved.truncation_point = arch.truncation_point.clone();
        Ok((
            Self {
                spec: resolved,
                trunk: arch.trunk.build(&mut trunk_rng),
                head: arch.head.build(&mut head_rng),
                trunk_channels: arch.trunk_channels,
                seed,
                training_config_digest: String::new(),
            },
            arch.pretrained,
        ))
    }

    pub fn from_weights(weights: &ModelWeights) -> Result<Self> {
        Self::from_weights_with(weights, &BackboneRegistry::default())
    }

    pub fn from_weights_with(weights: &ModelWeights, registry: &BackboneRegistry) -> Result<Self> {
        let (mut model, _) = Self::random(&weights.backbone, weights.seed, registry)?;
        model.training_config_digest = weights.training_config_digest.clone();
        let mut by_name: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for t in &weights.tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(Error::WeightFile(format!("tensor `{}` appears twice", t.name)));
            }
        }
        let mut used = 0;
        for p in model.params_mut() {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::WeightFile(format!("missing tensor `{}`", p.name)))?;
            if t.shape != p.shape {
                return Err(Error::WeightFile(format!("tensor `{}` has shape {:?}, expected {:?}", p.name, t.shape, p.shape)));
            }
            if t.kind != p.kind {
                return Err(Error::WeightFile(format!("tensor `{}` has kind {:?}", p.name, t.kind)));
            }
            p.value.copy_from_slice(&t.data);
            p.trainable = t.trainable && p.kind == crate::nn::ParamKind::Weight;
            used += 1;
        }
        if used != weights.tensors.len() {
            return Err(Error::WeightFile(format!(
                "{} tensors in file, architecture uses {used}",
                weights.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn to_weights(&self) -> ModelWeights {
        let tensors = self
            .params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                kind: p.kind,
                trainable: p.trainable,
                data: p.value.clone(),
            })
            .collect();
        ModelWeights {
            backbone: self.spec.clone(),
            tensors,
            seed: self.seed,
            training_config_digest: self.training_config_digest.clone(),
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trunk_channels(&self) -> usize {
        self.trunk_channels
    }

    pub fn set_training_config_digest(&mut self, digest: impl Into<String>) {
        self.training_config_digest = digest.into();
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().filter(|p| p.kind == crate::nn::ParamKind::Weight).map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn trunk_params_mut(&mut self) -> Vec<&mut Param> {
        self.trunk.params_mut()
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Param> {
        self.head.params_mut()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let side = self.spec.input_side;
        if (x.c, x.h, x.w) != (3, side, side) {
            return Err(Error::Shape {
                expected: format!("3×{side}×{side}"),
                actual: format!("{}×{}×{}", x.c, x.h, x.w),
            });
        }
        Ok(())
    }

    /// Trunk features `(n, trunk_channels, rows, cols)` in evaluation mode.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.trunk.forward(x))
    }

    /// Backbone output `(n, 1, rows, cols)` in evaluation mode.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.head.forward(&self.trunk.forward(x)))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let t = self.trunk.forward_train(x);
        Ok(self.head.forward_train(&t))
    }

    /// Training-mode trunk only, for feature-level heads built elsewhere.
    pub fn features_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.trunk.forward_train(x))
    }

    pub fn backward(&mut self, grad: &Tensor) {
        if let Some(g) = self.head.backward(grad, true) {
            self.trunk.backward(&g, false);
        }
    }

    pub fn features_backward(&mut self, grad: &Tensor) {
        self.trunk.backward(grad, false);
    }

    pub fn clear_cache(&mut self) {
        self.trunk.clear_cache();
        self.head.clear_cache();
    }

    /// Apply the trunk policy to the trunk's trainable flags.
    pub fn apply_trunk_policy(&mut self, policy: TrunkPolicy) {
        let trainable = policy == TrunkPolicy::FineTune;
        for p in self.trunk.params_mut() {
            if p.kind == crate::nn::ParamKind::Weight {
                p.trainable = trainable;
            }
        }
    }
}

/// Convert a resized RGB frame into a normalised `(1, 3, h, w)` tensor.
pub fn frame_tensor(frame: &Frame) -> Tensor {
    let (w, h) = frame.pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in frame.pixels.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = (px.0[c] as f32 / 255.0 - INPUT_MEAN[c]) / INPUT_STD[c];
        }
    }
    Tensor::from_vec(1, 3, h, w, data)
}

fn check_frame(model: &Model, frame: &Frame) -> Result<()> {
    let side = model.spec.input_side as u32;
    if frame.pixels.dimensions() != (side, side) {
        let (w, h) = frame.pixels.dimensions();
        return Err(Error::Shape {
            expected: format!("{side}×{side} frame"),
            actual: format!("{h}×{w} frame `{}`", frame.frame_id),
        });
    }
    if frame.stage != Stage::Resized {
        return Err(Error::Precondition(format!("frame `{}` is not resized", frame.frame_id)));
    }
    Ok(())
}

/// Map one resized frame to its receptive-field map.
pub fn forward_map(model: &Model, frame: &Frame) -> Result<FeatureMap> {
    let mut maps = forward_maps(model, std::slice::from_ref(frame))?;
    Ok(maps.pop().expect("one map per frame"))
}

/// Batched [`forward_map`].
pub fn forward_maps(model: &Model, frames: &[Frame]) -> Result<Vec<FeatureMap>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    for f in frames {
        check_frame(model, f)?;
    }
    let x = Tensor::stack(&frames.iter().map(frame_tensor).collect::<Vec<_>>());
    let y = model.forward(&x)?;
    tensor_to_maps(&y, frames.iter().map(|f| f.frame_id.clone()), &model.spec.id)
}

pub(crate) fn tensor_to_maps(
    y: &Tensor,
    ids: impl Iterator<Item = String>,
    backbone: &BackboneId,
) -> Result<Vec<FeatureMap>> {
    debug_assert_eq!(y.c, 1);
    ids.enumerate()
        .map(|(i, id)| {
            let s = y.sample(i);
            if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("backbone emitted non-finite value {bad} for `{id}`")));
            }
            Ok(FeatureMap {
                rows: y.h,
                cols: y.w,
                values: s.iter().map(|&v| v as f64).collect(),
                frame_id: id,
                backbone_id: backbone.clone(),
            })
        })
        .collect()
}

/// Initialise weights for a backbone. Pretrained trunks are read from `sources`;
/// a missing checkpoint is an error, never a random fallback.
pub fn build_backbone(spec: &BackboneSpec, seed: u64, sources: &PretrainedSources) -> Result<ModelWeights> {
    build_backbone_with(spec, seed, sources, &BackboneRegistry::default())
}

pub fn build_backbone_with(
    spec: &BackboneSpec,
    seed: u64,
    sources: &PretrainedSources,
    registry: &BackboneRegistry,
) -> Result<ModelWeights> {
    let (mut model, pretrained) = Model::random(spec, seed, registry)?;
    if pretrained {
        let path = sources.resolve(&spec.id)?;
        let checkpoint = pretrained::load_safetensors(&path)?;
        pretrained::load_trunk(&mut model.trunk, &checkpoint, &spec.id)?;
        model.apply_trunk_policy(spec.trunk_policy);
    }
    Ok(model.to_weights())
}

#[cfg(test)]
mod tests;
