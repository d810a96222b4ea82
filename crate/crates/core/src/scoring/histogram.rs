use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ScoreKind, ScoredFrame};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub normal: usize,
    pub anomalous: usize,
    pub unlabeled: usize,
}

impl HistogramBin {
    pub fn total(&self) -> usize {
        self.normal + self.anomalous + self.unlabeled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub kind: ScoreKind,
    pub min: f64,
    pub max: f64,
    pub bins: Vec<HistogramBin>,
    /// Fraction of samples lying in bins that hold both labels.
    pub overlap: f64,
}

impl Histogram {
    pub fn edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
        let width = (max - min) / bins as f64;
        (0..=bins).map(|k| if k == bins { max } else { min + k as f64 * width }).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "lo", "hi", "normal", "anomalous", "unlabeled"])?;
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record([
                i.to_string(),
                b.lo.to_string(),
                b.hi.to_string(),
                b.normal.to_string(),
                b.anomalous.to_string(),
                b.unlabeled.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Store(e.to_string()))?).expect("utf-8"))
    }

    /// Bar plot: normal counts in blue on the left of each bin, anomalous in red.
    pub fn render_png(&self) -> Result<Vec<u8>> {
        const W: u32 = 640;
        const H: u32 = 360;
        const MARGIN: u32 = 24;
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let peak = self.bins.iter().map(|b| b.normal.max(b.anomalous + b.unlabeled)).max().unwrap_or(0).max(1);
        let plot_w = W - 2 * MARGIN;
        let plot_h = H - 2 * MARGIN;
        let slot = plot_w as f64 / self.bins.len().max(1) as f64;
        for (i, b) in self.bins.iter().enumerate() {
            let x0 = MARGIN as f64 + i as f64 * slot;
            let half = (slot / 2.0).max(1.0);
            for (j, (count, color)) in [(b.normal, Rgb([40, 90, 200])), (b.anomalous + b.unlabeled, Rgb([210, 50, 40]))]
                .into_iter()
                .enumerate()
            {
                let bar_h = (count as f64 / peak as f64 * plot_h as f64).round() as u32;
                let xa = (x0 + j as f64 * half).round() as u32;
                let xb = ((x0 + (j + 1) as f64 * half).round() as u32).max(xa + 1).min(W - MARGIN);
                for x in xa..xb {
                    for y in (H - MARGIN - bar_h)..(H - MARGIN) {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN..=H - MARGIN {
            img.put_pixel(MARGIN - 1, y, Rgb([0, 0, 0]));
        }
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Equal-width per-label histogram over `[min, max]`.
pub fn score_histogram(scored: &[ScoredFrame], bins: usize, kind: ScoreKind) -> Result<Histogram> {
    if bins < 1 {
        return Err(Error::Precondition("histogram needs at least one bin".into()));
    }
    if scored.is_empty() {
        return Err(Error::Precondition("histogram of no samples".into()));
    }
    let values: Vec<f64> = scored.iter().map(|s| s.score(kind)).collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("score {v} is not finite")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = Histogram::edges(min, max, bins);
    let mut out: Vec<HistogramBin> = edges
        .windows(2)
        .map(|e| HistogramBin {
            lo: e[0],
            hi: e[1],
            normal: 0,
            anomalous: 0,
            unlabeled: 0,
        })
        .collect();
    for (s, v) in scored.iter().zip(&values) {
        // number of interior edges at or below v
        let k = edges[1..bins].partition_point(|e| e <= v);
        let b = &mut out[k];
        match s.label {
            Some(l) if l.is_anomalous() => b.anomalous += 1,
            Some(_) => b.normal += 1,
            None => b.unlabeled += 1,
        }
    }
    let mixed: usize = out.iter().filter(|b| b.normal > 0 && b.anomalous > 0).map(|b| b.total()).sum();
    Ok(Histogram {
        kind,
        min,
        max,
        overlap: mixed as f64 / scored.len() as f64,
        bins: out,
    })
}
