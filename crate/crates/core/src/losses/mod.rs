//! Pseudo-Huber transform, the one-class objectives and their gradients.

pub mod train;

use serde::{Deserialize, Serialize};

use crate::datapipe::Label;
use crate::model::FeatureMap;
use crate::{Error, Result};

pub use train::{train_fcdd, EpochRecord, TrainConfig, TrainOptions, TrainOutcome, TrainingLog};

/// Upper bound applied to `exp(-A)` in the anomalous term.
pub const EXP_CLAMP: f64 = 1.0 - 1e-7;
const MIN_COMPLEMENT: f64 = 1.0 - EXP_CLAMP;

/// `sqrt(u² + 1) - 1`, evaluated without cancellation near zero.
pub fn pseudo_huber(u: f64) -> f64 {
    let s = u * u;
    s / ((s + 1.0).sqrt() + 1.0)
}

/// `dH/du`.
pub fn pseudo_huber_grad(u: f64) -> f64 {
    u / (u * u + 1.0).sqrt()
}

pub fn pseudo_huber_map(map: &FeatureMap) -> FeatureMap {
    FeatureMap {
        values: map.values.iter().map(|&v| pseudo_huber(v)).collect(),
        ..map.clone()
    }
}

/// `1 - exp(-a)` clamped from below, and whether the clamp engaged.
fn complement(a: f64) -> (f64, bool) {
    let c = -(-a).exp_m1();
    if c < MIN_COMPLEMENT {
        (MIN_COMPLEMENT, true)
    } else {
        (c, false)
    }
}

/// Loss of one sample given the mean `a` of its transformed map.
pub fn sample_loss(a: f64, label: Label) -> (f64, bool) {
    match label {
        Label::Normal => (a, false),
        Label::Anomalous => {
            let (c, sat) = complement(a);
            (-c.ln(), sat)
        }
    }
}

/// `dℓ/da` for one sample.
pub fn sample_loss_grad(a: f64, label: Label) -> f64 {
    match label {
        Label::Normal => 1.0,
        Label::Anomalous => {
            let (c, _) = complement(a);
            -(-a).exp().min(EXP_CLAMP) / c
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// Anomalous samples whose log term hit the clamp.
    pub saturated: usize,
}

fn check_batch(maps: &[FeatureMap], labels: &[Label], dims: (usize, usize)) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if maps.len() != labels.len() {
        return Err(Error::Dimension {
            expected: maps.len(),
            actual: labels.len(),
        });
    }
    for m in maps {
        if (m.rows, m.cols) != dims {
            return Err(Error::Shape {
                expected: format!("{}×{}", dims.0, dims.1),
                actual: format!("{}×{}", m.rows, m.cols),
            });
        }
        if let Some(v) = m.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "map `{}` holds {v}; the loss expects transformed, non-negative values",
                m.frame_id
            )));
        }
    }
    Ok(())
}

/// Mean over samples of the per-sample FCDD loss on transformed maps.
pub fn fcdd_loss(maps: &[FeatureMap], labels: &[Label], dims: (usize, usize)) -> Result<LossValue> {
    check_batch(maps, labels, dims)?;
    let mut per_sample = Vec::with_capacity(maps.len());
    let mut saturated = 0;
    for (m, &z) in maps.iter().zip(labels) {
        let (l, sat) = sample_loss(m.mean(), z);
        saturated += sat as usize;
        per_sample.push(l);
    }
    let value = per_sample.iter().sum::<f64>() / maps.len() as f64;
    Ok(LossValue {
        value,
        per_sample,
        saturated,
    })
}

/// Gradient of [`fcdd_loss`] with respect to every transformed map element.
pub fn fcdd_loss_gradient(maps: &[FeatureMap], labels: &[Label], dims: (usize, usize)) -> Result<Vec<FeatureMap>> {
    check_batch(maps, labels, dims)?;
    let scale = 1.0 / (maps.len() * dims.0 * dims.1) as f64;
    Ok(maps
        .iter()
        .zip(labels)
        .map(|(m, &z)| {
            let g = scale * sample_loss_grad(m.mean(), z);
            FeatureMap {
                values: vec![g; m.len()],
                ..m.clone()
            }
        })
        .collect())
}

/// Loss and gradient with respect to the raw backbone outputs, composing the
/// pseudo-Huber transform. `raw` holds `n` contiguous maps of `cells` values.
pub fn fcdd_backward(raw: &[f32], labels: &[Label], cells: usize) -> (f64, Vec<f32>, usize) {
    let n = labels.len();
    debug_assert_eq!(raw.len(), n * cells);
    let scale = 1.0 / (n * cells) as f64;
    let mut grad = vec![0f32; raw.len()];
    let mut total = 0.0;
    let mut saturated = 0;
    for (i, &z) in labels.iter().enumerate() {
        let x = &raw[i * cells..(i + 1) * cells];
        let a = x.iter().map(|&u| pseudo_huber(u as f64)).sum::<f64>() / cells as f64;
        let (l, sat) = sample_loss(a, z);
        total += l;
        saturated += sat as usize;
        let g = scale * sample_loss_grad(a, z);
        for (d, &u) in grad[i * cells..(i + 1) * cells].iter_mut().zip(x) {
            *d = (g * pseudo_huber_grad(u as f64)) as f32;
        }
    }
    (total / n as f64, grad, saturated)
}

/// Cross-entropy one-class loss on per-sample normality estimates `ℓ ∈ (0, 1)`.
pub fn cross_entropy_loss(ell: &[f64], labels: &[Label]) -> f64 {
    let n = ell.len() as f64;
    -ell.iter()
        .zip(labels)
        .map(|(&l, &z)| match z {
            Label::Normal => l.ln(),
            Label::Anomalous => (1.0 - l).ln(),
        })
        .sum::<f64>()
        / n
}

/// The same loss written directly in the transformed scores `h`, `ℓ = exp(-h)`.
pub fn substituted_loss(h: &[f64], labels: &[Label]) -> f64 {
    let n = h.len() as f64;
    h.iter()
        .zip(labels)
        .map(|(&h, &z)| match z {
            Label::Normal => h,
            Label::Anomalous => -(-(-h).exp_m1()).ln(),
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvddConfig {
    pub center: Vec<f64>,
    /// The center is held fixed during training.
    pub fixed_center: bool,
}

impl SvddConfig {
    /// Center at the mean of the given (initial, normal) maps.
    pub fn from_normal_maps(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Precondition("no maps for the center".into()))?;
        let mut center = vec![0.0; first.len()];
        for m in maps {
            if m.len() != center.len() {
                return Err(Error::Dimension {
                    expected: center.len(),
                    actual: m.len(),
                });
            }
            for (c, v) in center.iter_mut().zip(&m.values) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= maps.len() as f64);
        Ok(Self {
            center,
            fixed_center: true,
        })
    }
}

/// `(1/n) Σ ‖Φ - c‖²`.
pub fn svdd_objective(maps: &[FeatureMap], cfg: &SvddConfig) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if let Some(c) = cfg.center.iter().find(|c| !c.is_finite()) {
        return Err(Error::Precondition(format!("center holds {c}")));
    }
    let mut total = 0.0;
    for m in maps {
        if m.len() != cfg.center.len() {
            return Err(Error::Dimension {
                expected: cfg.center.len(),
                actual: m.len(),
            });
        }
        total += m.values.iter().zip(&cfg.center).map(|(v, c)| (v - c) * (v - c)).sum::<f64>();
    }
    Ok(total / maps.len() as f64)
}
