//! Architecture descriptors.
//!
//! A plan is a named list of layer descriptors. Shapes and receptive-field
//! extents are derived from the plan alone, so truncation points can be
//! resolved before any weights are allocated.

use rand::Rng;

use crate::nn::{BasicBlock, BatchNorm2d, Bottleneck, Conv2d, Layer, LeakyRelu, MaxPool2d, Relu, Sequential};

pub(crate) const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvPlan {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub bias: bool,
    pub gain: f32,
}

impl ConvPlan {
    pub fn square(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride,
            pad: (pad, pad),
            bias,
            gain: RELU_GAIN,
        }
    }

    fn dims(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let (kh, kw) = self.kernel;
        if h + 2 * self.pad.0 < kh || w + 2 * self.pad.1 < kw {
            return None;
        }
        Some((
            self.out_ch,
            (h + 2 * self.pad.0 - kh) / self.stride + 1,
            (w + 2 * self.pad.1 - kw) / self.stride + 1,
        ))
    }

    fn build<R: Rng + ?Sized>(&self, name: &str, rng: &mut R) -> Conv2d {
        Conv2d::new(name, self.in_ch, self.out_ch, self.kernel, self.stride, self.pad, self.bias, self.gain, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Leaky(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerPlan {
    Conv(ConvPlan),
    BatchNorm { channels: usize, eps: f32 },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize, pad: usize },
    /// conv → batch norm → activation, sub-layers named `.conv`, `.bn`, `.act`.
    ConvBnAct { conv: ConvPlan, eps: f32, act: Activation },
    Bottleneck { in_ch: usize, width: usize, stride: usize },
    Basic { in_ch: usize, out_ch: usize, stride: usize },
}

impl LayerPlan {
    /// Output `(channels, rows, cols)`, or `None` if the input is too small.
    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        match self {
            LayerPlan::Conv(p) | LayerPlan::ConvBnAct { conv: p, .. } => {
                (c == p.in_ch).then_some(())?;
                p.dims(h, w)
            }
            LayerPlan::BatchNorm { .. } | LayerPlan::Act(_) => Some((c, h, w)),
            LayerPlan::MaxPool { kernel, stride, pad } => {
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return None;
                }
                Some((c, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1))
            }
            LayerPlan::Bottleneck { in_ch, width, stride } => {
                (c == *in_ch).then_some(())?;
                ConvPlan::square(*width, width * 4, 3, *stride, 1, false).dims(h, w)
            }
            LayerPlan::Basic { in_ch, out_ch, stride } => {
                (c == *in_ch).then_some(())?;
                ConvPlan::square(*in_ch, *out_ch, 3, *stride, 1, false).dims(h, w)
            }
        }
    }

    /// `(kernel extent, stride)` along one axis for receptive-field analysis.
    pub fn field(&self) -> (usize, usize) {
        match self {
            LayerPlan::Conv(p) | LayerPlan::ConvBnAct { conv: p, .. } => (p.kernel.0.max(p.kernel.1), p.stride),
            LayerPlan::BatchNorm { .. } | LayerPlan::Act(_) => (1, 1),
            LayerPlan::MaxPool { kernel, stride, .. } => (*kernel, *stride),
            LayerPlan::Bottleneck { stride, .. } => (3, *stride),
            // two stacked 3×3 convolutions, the first strided
            LayerPlan::Basic { stride, .. } => (3 + 2 * stride, *stride),
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, name: &str, rng: &mut R) -> Box<dyn Layer> {
        match self {
            LayerPlan::Conv(p) => Box::new(p.build(name, rng)),
            LayerPlan::BatchNorm { channels, eps } => Box::new(BatchNorm2d::new(name, *channels, *eps)),
            LayerPlan::Act(a) => build_act(*a),
            LayerPlan::MaxPool { kernel, stride, pad } => Box::new(MaxPool2d::new(*kernel, *stride, *pad)),
            LayerPlan::ConvBnAct { conv, eps, act } => {
                let mut s = Sequential::new();
                s.push(format!("{name}.conv"), conv.build(&format!("{name}.conv"), rng));
                s.push(format!("{name}.bn"), BatchNorm2d::new(&format!("{name}.bn"), conv.out_ch, *eps));
                s.push_boxed(format!("{name}.act"), build_act(*act));
                Box::new(s)
            }
            LayerPlan::Bottleneck { in_ch, width, stride } => Box::new(Bottleneck::new(name, *in_ch, *width, *stride, rng)),
            LayerPlan::Basic { in_ch, out_ch, stride } => Box::new(BasicBlock::new(name, *in_ch, *out_ch, *stride, rng)),
        }
    }
}

fn build_act(a: Activation) -> Box<dyn Layer> {
    match a {
        Activation::Relu => Box::new(Relu::new()),
        Activation::Leaky(s) => Box::new(LeakyRelu::new(s)),
    }
}

/// Named, ordered layer descriptors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plan {
    pub entries: Vec<(String, LayerPlan)>,
}

impl Plan {
    pub fn push(&mut self, name: impl Into<String>, layer: LayerPlan) {
        self.entries.push((name.into(), layer));
    }

    /// Shape after each entry; stops at the first entry the input cannot pass.
    pub fn trace(&self, c: usize, h: usize, w: usize) -> Vec<(String, (usize, usize, usize))> {
        let mut dims = (c, h, w);
        let mut out = Vec::new();
        for (name, l) in &self.entries {
            match l.output_dims(dims.0, dims.1, dims.2) {
                Some(d) => {
                    dims = d;
                    out.push((name.clone(), d));
                }
                None => break,
            }
        }
        out
    }

    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let trace = self.trace(c, h, w);
        if trace.len() != self.entries.len() {
            return None;
        }
        Some(trace.last().map_or((c, h, w), |(_, d)| *d))
    }

    pub fn truncate_after(&mut self, name: &str) -> bool {
        match self.entries.iter().position(|(n, _)| n == name) {
            Some(i) => {
                self.entries.truncate(i + 1);
                true
            }
            None => false,
        }
    }

    /// Receptive-field extent and cumulative stride of the whole plan.
    pub fn field(&self) -> (usize, usize) {
        let mut extent = 1usize;
        let mut jump = 1usize;
        for (_, l) in &self.entries {
            let (k, s) = l.field();
            extent += (k - 1) * jump;
            jump *= s;
        }
        (extent, jump)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequential {
        let mut s = Sequential::new();
        for (name, l) in &self.entries {
            s.push_boxed(name.clone(), l.build(name, rng));
        }
        s
    }
}
