//! Minimal CPU convolutional network engine.
//!
//! Layers implement an explicit forward/backward pair over NCHW [`Tensor`]s.
//! `forward` is pure (evaluation mode, batch statistics frozen) and may be
//! called concurrently; `forward_train` caches what `backward` needs and
//! updates normalization statistics.

mod act;
mod adam;
mod conv;
mod norm;
mod pool;
mod residual;
mod tensor;

pub use act::{LeakyRelu, Relu};
pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};
pub use residual::{BasicBlock, Bottleneck};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Learnable weights versus running statistics carried along with the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub fn weight(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            kind: ParamKind::Weight,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            value,
            grad: Vec::new(),
            kind: ParamKind::Buffer,
            trainable: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Whether `backward` should accumulate into this parameter.
    pub fn wants_grad(&self) -> bool {
        self.kind == ParamKind::Weight && self.trainable
    }
}

/// Kaiming-normal initialisation for a fan-in of `fan_in` and activation gain `gain`.
pub(crate) fn kaiming_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, gain: f32) -> Vec<f32> {
    let std = gain / (fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub trait Layer: Send + Sync {
    /// Evaluation-mode forward pass.
    fn forward(&self, x: &Tensor) -> Tensor;

    /// Training-mode forward pass; caches activations for `backward`.
    fn forward_train(&mut self, x: &Tensor) -> Tensor;

    /// Back-propagate `grad` (shaped like the last `forward_train` output),
    /// accumulating parameter gradients. Returns the input gradient when asked.
    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor>;

    /// Output `(channels, rows, cols)` for an input of the given shape.
    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize);

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Drop cached activations.
    fn clear_cache(&mut self);
}

/// Layers applied in order, each tagged with the name used for truncation.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }

    /// Keep layers up to and including `name`.
    pub fn truncate_after(&mut self, name: &str) -> bool {
        match self.layers.iter().position(|(n, _)| n == name) {
            Some(i) => {
                self.layers.truncate(i + 1);
                true
            }
            None => false,
        }
    }

    /// Shape after every layer, in order.
    pub fn trace_dims(&self, c: usize, h: usize, w: usize) -> Vec<(String, (usize, usize, usize))> {
        let mut dims = (c, h, w);
        self.layers
            .iter()
            .map(|(name, l)| {
                dims = l.output_dims(dims.0, dims.1, dims.2);
                (name.clone(), dims)
            })
            .collect()
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut iter = self.layers.iter();
        let Some((_, first)) = iter.next() else {
            return x.clone();
        };
        let mut out = first.forward(x);
        for (_, l) in iter {
            out = l.forward(&out);
        }
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return x.clone();
        };
        let mut out = first.forward_train(x);
        for (_, l) in iter {
            out = l.forward_train(&out);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = self.layers.len();
        if n == 0 {
            return need_input_grad.then(|| grad.clone());
        }
        let mut g = grad.clone();
        for i in (0..n).rev() {
            let need = i > 0 || need_input_grad;
            match self.layers[i].1.backward(&g, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }

    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        self.layers
            .iter()
            .fold((c, h, w), |d, (_, l)| l.output_dims(d.0, d.1, d.2))
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|(_, l)| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|(_, l)| l.clear_cache());
    }
}
