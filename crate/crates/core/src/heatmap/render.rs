use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::Heatmap;
use crate::error::IoContext;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    pub fn id(&self) -> &'static str {
        match self {
            Colormap::Jet => "jet",
            Colormap::Gray => "gray",
        }
    }

    /// Colour of a level in `0..=255`.
    pub fn color(&self, level: u8) -> Rgb<u8> {
        match self {
            Colormap::Jet => jet(level as f64 / 255.0),
            Colormap::Gray => Rgb([level; 3]),
        }
    }
}

/// Blue → cyan → yellow → red ramp over `t ∈ [0, 1]`.
pub fn jet(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

/// Where the display range comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Bounds {
    #[default]
    PerImage,
    /// Shared `[min, max]` across a run.
    Global { min: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    /// The display range is `[min, min + (max − min)·quartile]`.
    pub quartile: f64,
    pub colormap: Colormap,
    pub bounds: Bounds,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            quartile: 0.25,
            colormap: Colormap::Jet,
            bounds: Bounds::PerImage,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.quartile > 0.0 && self.quartile <= 1.0) {
            return Err(Error::ConfigField {
                field: "quartile".into(),
                reason: format!("{} is outside (0, 1]", self.quartile),
            });
        }
        if let Bounds::Global { min, max } = self.bounds {
            if !(min.is_finite() && max.is_finite() && min <= max) {
                return Err(Error::ConfigField {
                    field: "bounds".into(),
                    reason: format!("[{min}, {max}] is not a range"),
                });
            }
        }
        Ok(())
    }

    /// `(lo, hi)` of the display range for one heatmap.
    pub fn display_range(&self, heat: &Heatmap) -> (f64, f64) {
        let (min, max) = match self.bounds {
            Bounds::PerImage => heat.min_max(),
            Bounds::Global { min, max } => (min, max),
        };
        (min, min + (max - min) * self.quartile)
    }
}

/// `[min, max]` over many heatmaps, for [`Bounds::Global`].
pub fn global_bounds<'a>(heatmaps: impl IntoIterator<Item = &'a Heatmap>) -> Option<(f64, f64)> {
    heatmaps
        .into_iter()
        .map(Heatmap::min_max)
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub frame_id: String,
    pub backbone_id: String,
    pub sigma: f64,
    pub quartile: f64,
    pub colormap: String,
    pub bounds_mode: String,
    pub display_min: f64,
    pub display_max: f64,
    /// The display range was empty; the image is the base colour.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub png: Vec<u8>,
    pub meta: RenderMeta,
}

impl Rendered {
    /// Write `<path>` and a `<path>.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.png).at(path)?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.meta)? + "\n").at(&side)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Colour level of a value: linear over `[lo, hi]`, saturated outside.
pub fn level(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render(heat: &Heatmap, spec: &RenderSpec) -> Result<Rendered> {
    spec.validate()?;
    if heat.values.len() != heat.rows * heat.cols || heat.rows == 0 || heat.cols == 0 {
        return Err(Error::Dimension {
            expected: heat.rows * heat.cols,
            actual: heat.values.len(),
        });
    }
    if let Some(v) = heat.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("heatmap `{}` holds {v}", heat.frame_id)));
    }
    let (lo, hi) = spec.display_range(heat);
    let degenerate = !(hi > lo);
    let lut: Vec<Rgb<u8>> = (0..=255u8).map(|l| spec.colormap.color(l)).collect();
    let mut img = RgbImage::new(heat.cols as u32, heat.rows as u32);
    for (p, &v) in img.pixels_mut().zip(&heat.values) {
        *p = lut[level(v, lo, hi) as usize];
    }
    let mut png = Cursor::new(Vec::new());
    img.write_to(&mut png, ImageFormat::Png)?;
    Ok(Rendered {
        png: png.into_inner(),
        meta: RenderMeta {
            frame_id: heat.frame_id.clone(),
            backbone_id: heat.backbone_id.clone(),
            sigma: heat.sigma_used,
            quartile: spec.quartile,
            colormap: spec.colormap.id().into(),
            bounds_mode: match spec.bounds {
                Bounds::PerImage => "per_image".into(),
                Bounds::Global { .. } => "global".into(),
            },
            display_min: lo,
            display_max: hi,
            degenerate,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(values: Vec<f64>) -> Heatmap {
        Heatmap {
            rows: 1,
            cols: values.len(),
            values,
            frame_id: "ramp".into(),
            sigma_used: 4.0,
            backbone_id: "CNN27".into(),
        }
    }

    fn decode(png: &[u8]) -> RgbImage {
        image::load_from_memory(png).unwrap().to_rgb8()
    }

    #[test]
    fn quarter_range_saturates() {
        let h = ramp((0..=8).map(f64::from).collect());
        let r = render(&h, &RenderSpec::default()).unwrap();
        assert_eq!((r.meta.display_min, r.meta.display_max), (0.0, 2.0));
        let img = decode(&r.png);
        let top = jet(1.0);
        assert_eq!(*img.get_pixel(2, 0), top);
        assert_eq!(*img.get_pixel(8, 0), top);
        assert_eq!(*img.get_pixel(1, 0), jet(128.0 / 255.0));
        assert_eq!(*img.get_pixel(0, 0), jet(0.0));
    }

    #[test]
    fn full_range_is_linear() {
        let h = ramp((0..=255).map(f64::from).collect());
        let spec = RenderSpec {
            quartile: 1.0,
            colormap: Colormap::Gray,
            ..Default::default()
        };
        let img = decode(&render(&h, &spec).unwrap().png);
        for x in 0..256u32 {
            assert_eq!(img.get_pixel(x, 0).0, [x as u8; 3]);
        }
    }

    #[test]
    fn constant_heatmap_is_flagged() {
        let r = render(&ramp(vec![3.0; 5]), &RenderSpec::default()).unwrap();
        assert!(r.meta.degenerate);
        let img = decode(&r.png);
        assert!(img.pixels().all(|p| *p == jet(0.0)));
    }

    #[test]
    fn global_bounds_and_sidecar() {
        let a = ramp(vec![0.0, 1.0]);
        let b = ramp(vec![2.0, 6.0]);
        let (min, max) = global_bounds([&a, &b]).unwrap();
        let spec = RenderSpec {
            bounds: Bounds::Global { min, max },
            ..Default::default()
        };
        let r = render(&a, &spec).unwrap();
        assert_eq!((r.meta.display_min, r.meta.display_max), (0.0, 1.5));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        r.save(&p).unwrap();
        let meta: RenderMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta, r.meta);
        assert!(RenderSpec {
            quartile: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
