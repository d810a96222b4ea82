//! Full-resolution deterioration heatmaps from receptive-field maps.

mod render;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::Frame;
use crate::error::IoContext;
use crate::losses::pseudo_huber_map;
use crate::model::{forward_map, geometry_of, FeatureMap, Model, ModelWeights, ReceptiveFieldGeometry};
use crate::{Error, Result};

pub use render::{global_bounds, jet, render, Bounds, Colormap, RenderMeta, RenderSpec, Rendered};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernelSpec {
    pub sigma: f64,
    /// Pixels farther than this from a cell center receive nothing from it.
    pub support_radius: f64,
}

impl GaussianKernelSpec {
    pub fn new(sigma: f64, support_radius: f64) -> Result<Self> {
        let k = Self { sigma, support_radius };
        k.validate()?;
        Ok(k)
    }

    /// σ = stride/2 with a 4σ footprint.
    pub fn for_geometry(geom: &ReceptiveFieldGeometry) -> Self {
        let sigma = geom.total_stride as f64 / 2.0;
        Self {
            sigma,
            support_radius: 4.0 * sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::KernelSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.support_radius >= 3.0 * self.sigma) {
            return Err(Error::KernelSpec(format!(
                "support radius {} is below 3σ = {}",
                self.support_radius,
                3.0 * self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub frame_id: String,
    pub sigma_used: f64,
    pub backbone_id: String,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// First `(row, col)` holding the maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols.max(1), best % self.cols.max(1))
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Little-endian dump: rows and cols as u64, then f32 values.
    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        self.write_raw(&mut buf).at(path)?;
        std::fs::write(path, buf).at(path)
    }
}

/// Read a raw dump back as `(rows, cols, values)`.
pub fn read_raw<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f32>)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| Error::Precondition(format!("raw heatmap header: {e}")))?;
    let rows = u64::from_le_bytes(head[..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(head[8..].try_into().expect("8 bytes")) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::Precondition(format!("raw heatmap body: {e}")))?;
    if body.len() != rows * cols * 4 {
        return Err(Error::Dimension {
            expected: rows * cols * 4,
            actual: body.len(),
        });
    }
    Ok((rows, cols, body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()))
}

fn check_inputs(field: &FeatureMap, geom: &ReceptiveFieldGeometry, kernel: &GaussianKernelSpec, dims: (usize, usize)) -> Result<()> {
    kernel.validate()?;
    if field.values.len() != field.rows * field.cols {
        return Err(Error::Dimension {
            expected: field.rows * field.cols,
            actual: field.values.len(),
        });
    }
    if let Some(v) = field.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("map `{}` holds {v}", field.frame_id)));
    }
    if !geom.fits(field.rows, field.cols, dims.0, dims.1) {
        return Err(Error::Geometry(format!(
            "{}×{} centers at stride {} offset {} leave the {}×{} canvas",
            field.rows, field.cols, geom.total_stride, geom.offset, dims.0, dims.1
        )));
    }
    Ok(())
}

fn empty_heatmap(field: &FeatureMap, kernel: &GaussianKernelSpec, (h, w): (usize, usize)) -> Heatmap {
    Heatmap {
        rows: h,
        cols: w,
        values: vec![0.0; h * w],
        frame_id: field.frame_id.clone(),
        sigma_used: kernel.sigma,
        backbone_id: field.backbone_id.to_string(),
    }
}

/// Accumulate one fixed-σ Gaussian per cell, weighted by the cell value,
/// clipped at the canvas edge.
pub fn gaussian_upsample(
    field: &FeatureMap,
    geom: &ReceptiveFieldGeometry,
    kernel: &GaussianKernelSpec,
    dims: (usize, usize),
) -> Result<Heatmap> {
    check_inputs(field, geom, kernel, dims)?;
    let (h, w) = dims;
    let mut out = empty_heatmap(field, kernel, dims);
    let s2 = 2.0 * kernel.sigma * kernel.sigma;
    let norm = 1.0 / (std::f64::consts::PI * s2);
    let r = kernel.support_radius;
    let r2 = r * r;
    let mut gx = Vec::new();
    for i in 0..field.rows {
        for j in 0..field.cols {
            let d = field.values[i * field.cols + j];
            if d == 0.0 {
                continue;
            }
            let (cy, cx) = geom.center(i, j);
            let y0 = (cy - r).ceil().max(0.0) as usize;
            let y1 = ((cy + r).floor() as isize).min(h as isize - 1);
            let x0 = (cx - r).ceil().max(0.0) as usize;
            let x1 = ((cx + r).floor() as isize).min(w as isize - 1);
            if y1 < y0 as isize || x1 < x0 as isize {
                continue;
            }
            let (y1, x1) = (y1 as usize, x1 as usize);
            gx.clear();
            gx.extend((x0..=x1).map(|x| (-(x as f64 - cx).powi(2) / s2).exp()));
            for y in y0..=y1 {
                let dy2 = (y as f64 - cy).powi(2);
                let ay = d * norm * (-dy2 / s2).exp();
                let row = &mut out.values[y * w..(y + 1) * w];
                for (x, g) in (x0..=x1).zip(&gx) {
                    if dy2 + (x as f64 - cx).powi(2) <= r2 {
                        row[x] += ay * g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Same result as [`gaussian_upsample`] by visiting every pixel for every cell.
pub fn gaussian_upsample_dense(
    field: &FeatureMap,
    geom: &ReceptiveFieldGeometry,
    kernel: &GaussianKernelSpec,
    dims: (usize, usize),
) -> Result<Heatmap> {
    check_inputs(field, geom, kernel, dims)?;
    let mut out = empty_heatmap(field, kernel, dims);
    let s2 = 2.0 * kernel.sigma * kernel.sigma;
    let r2 = kernel.support_radius * kernel.support_radius;
    for y in 0..dims.0 {
        for x in 0..dims.1 {
            let mut acc = 0.0;
            for i in 0..field.rows {
                for j in 0..field.cols {
                    let (cy, cx) = geom.center(i, j);
                    let q = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if q <= r2 {
                        acc += field.values[i * field.cols + j] * (-q / s2).exp() / (std::f64::consts::PI * s2);
                    }
                }
            }
            out.values[y * dims.1 + x] = acc;
        }
    }
    Ok(out)
}

pub struct HeatmapOutput {
    pub heatmap: Heatmap,
    pub rendered: Rendered,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    /// `(frame_id, reason)`.
    pub failures: Vec<(String, String)>,
}

/// Heatmap of one frame: forward map, transform, upsample to the frame size.
pub fn frame_heatmap(model: &Model, frame: &Frame, kernel: &GaussianKernelSpec) -> Result<Heatmap> {
    let geom = geometry_of(model.spec())?;
    let field = pseudo_huber_map(&forward_map(model, frame)?);
    let (rows, cols) = frame.dims();
    gaussian_upsample(&field, &geom, kernel, (rows as usize, cols as usize))
}

/// Per-frame heatmaps and renders. Rendering with [`Bounds::Global`]
/// bounds is left to the caller, who knows the run.
pub fn batch_heatmaps(
    weights: &ModelWeights,
    frames: &[Frame],
    kernel: &GaussianKernelSpec,
    spec: &RenderSpec,
) -> Result<(Vec<HeatmapOutput>, FailureReport)> {
    if frames.is_empty() {
        return Ok((Vec::new(), FailureReport::default()));
    }
    let model = Model::from_weights(weights)?;
    batch_with_model(&model, frames, kernel, spec)
}

pub fn batch_with_model(
    model: &Model,
    frames: &[Frame],
    kernel: &GaussianKernelSpec,
    spec: &RenderSpec,
) -> Result<(Vec<HeatmapOutput>, FailureReport)> {
    kernel.validate()?;
    spec.validate()?;
    let results: Vec<Result<HeatmapOutput>> = frames
        .par_iter()
        .map(|f| {
            let heatmap = frame_heatmap(model, f, kernel)?;
            let rendered = render(&heatmap, spec)?;
            Ok(HeatmapOutput { heatmap, rendered })
        })
        .collect();
    let mut out = Vec::new();
    let mut report = FailureReport::default();
    for (f, r) in frames.iter().zip(results) {
        match r {
            Ok(o) => out.push(o),
            Err(e) => report.failures.push((f.frame_id.clone(), e.to_string())),
        }
    }
    Ok((out, report))
}
