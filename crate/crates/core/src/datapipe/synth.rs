//! Synthetic track images: ballast, sleeper bands and rails, with dark decay
//! blotches on the sleepers of anomalous images.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Label, ManifestItem, SamplingPlan};
use crate::error::IoContext;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SleeperGeometry {
    pub count: u32,
    /// Band thickness range as a fraction of the canvas height.
    pub thickness: (f64, f64),
    /// Maximum vertical displacement of a band, fraction of height.
    pub jitter: f64,
    /// Rail centres as fractions of the canvas width.
    pub rails: Vec<f64>,
    pub rail_width: f64,
}

impl Default for SleeperGeometry {
    fn default() -> Self {
        Self {
            count: 3,
            thickness: (0.13, 0.18),
            jitter: 0.04,
            rails: vec![0.27, 0.73],
            rail_width: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectModel {
    /// Inclusive range of blotches per anomalous image.
    pub blotch_count: (u32, u32),
    /// Blotch radius range in pixels.
    pub radius: (f64, f64),
    /// Blend weight of the dark decay texture, in `(0, 1]`.
    pub contrast: f64,
}

impl Default for DefectModel {
    fn default() -> Self {
        Self {
            blotch_count: (1, 2),
            radius: (8.0, 15.0),
            contrast: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub sleepers: SleeperGeometry,
    #[serde(default)]
    pub defect: DefectModel,
    pub normal_count: usize,
    pub anomalous_count: usize,
    pub seed: u64,
    /// Lay the samples along a virtual track, this far apart, normals first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_spacing_m: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 224,
            height: 224,
            sleepers: SleeperGeometry::default(),
            defect: DefectModel::default(),
            normal_count: 400,
            anomalous_count: 200,
            seed: 1,
            frame_spacing_m: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, reason: &str| Error::ConfigField {
            field: field.into(),
            reason: reason.into(),
        };
        if self.normal_count == 0 || self.anomalous_count == 0 {
            return Err(field("counts", "both classes need at least one image"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(field("canvas", "canvas must be at least 16×16"));
        }
        if self.frame_spacing_m.is_some_and(|d| !(d > 0.0 && d.is_finite())) {
            return Err(field("frame_spacing_m", "must be positive"));
        }
        let s = &self.sleepers;
        if s.count == 0 {
            return Err(field("sleepers.count", "at least one sleeper band is required"));
        }
        if !(0.0 < s.thickness.0 && s.thickness.0 <= s.thickness.1) || s.thickness.1 * s.count as f64 > 0.9 {
            return Err(field("sleepers.thickness", "bands must be positive and fit on the canvas"));
        }
        if s.rails.iter().any(|r| !(0.0..=1.0).contains(r)) || !(0.0..0.5).contains(&s.rail_width) {
            return Err(field("sleepers.rails", "rail positions and width must be fractions of the width"));
        }
        let d = &self.defect;
        if d.blotch_count.0 == 0 || d.blotch_count.0 > d.blotch_count.1 {
            return Err(field("defect.blotch_count", "need 1 ≤ min ≤ max"));
        }
        if !(d.radius.0 >= 1.0 && d.radius.0 <= d.radius.1) {
            return Err(field("defect.radius", "need 1 ≤ min ≤ max"));
        }
        // Below this blend the blotches fall inside the wood grain variation.
        if !(0.3..=1.0).contains(&d.contrast) {
            return Err(field("defect.contrast", "must lie in [0.3, 1]"));
        }
        Ok(())
    }

    pub fn frame_id(&self, label: Label, index: usize) -> String {
        match label {
            Label::Normal => format!("syn-n-{index:05}"),
            Label::Anomalous => format!("syn-a-{index:05}"),
        }
    }
}

/// One generated sample.
pub struct SyntheticSample {
    pub frame_id: String,
    pub label: Label,
    pub image: RgbImage,
    pub mask: GrayImage,
}

fn stream(spec: &SyntheticSpec, label: Label, index: usize, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((index as u64) << 8) | ((label.z() as u64) << 4) | part);
    rng
}

struct Scene {
    image: RgbImage,
    /// Pixels that belong to a sleeper and are not covered by a rail.
    wood: Vec<bool>,
    bands: Vec<(u32, u32)>,
}

fn clamp8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render_scene(spec: &SyntheticSpec, label: Label, index: usize) -> Scene {
    let (w, h) = (spec.width, spec.height);
    let mut rng = stream(spec, label, index, 0);

    // Ballast: bilinear coarse noise plus per-pixel grit.
    let cell = 7u32;
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let coarse: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(80.0..150.0)).collect();
    let tint: f64 = rng.random_range(-6.0..6.0);
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (x0, y0) = (fx as u32, fy as u32);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let at = |xx: u32, yy: u32| coarse[(yy * gw + xx) as usize];
            let v = at(x0, y0) * (1.0 - tx) * (1.0 - ty)
                + at(x0 + 1, y0) * tx * (1.0 - ty)
                + at(x0, y0 + 1) * (1.0 - tx) * ty
                + at(x0 + 1, y0 + 1) * tx * ty;
            let g = v + rng.random_range(-14.0..14.0);
            image.put_pixel(x, y, Rgb([clamp8(g + 4.0 + tint), clamp8(g), clamp8(g - 6.0 - tint)]));
        }
    }

    // Sleepers.
    let s = &spec.sleepers;
    let pitch = h as f64 / s.count as f64;
    let wood_base = [
        rng.random_range(140.0..165.0),
        rng.random_range(100.0..120.0),
        rng.random_range(60.0..80.0),
    ];
    let mut wood = vec![false; (w * h) as usize];
    let mut bands = Vec::new();
    for k in 0..s.count {
        let thick = rng.random_range(s.thickness.0..=s.thickness.1) * h as f64;
        let centre = (k as f64 + 0.5) * pitch + rng.random_range(-s.jitter..=s.jitter) * h as f64;
        let y0 = (centre - thick / 2.0).max(0.0).round() as u32;
        let y1 = ((centre + thick / 2.0).round() as u32).min(h);
        let freq = rng.random_range(0.05..0.12);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in y0..y1 {
            let row_phase = phase + 0.7 * (y as f64 * 0.9).sin();
            for x in 0..w {
                let grain = 1.0 + 0.07 * (x as f64 * freq + row_phase).sin();
                let n = rng.random_range(-6.0..6.0);
                let px = Rgb([
                    clamp8(wood_base[0] * grain + n),
                    clamp8(wood_base[1] * grain + n),
                    clamp8(wood_base[2] * grain + n),
                ]);
                image.put_pixel(x, y, px);
                wood[(y * w + x) as usize] = true;
            }
        }
        if y1 > y0 {
            bands.push((y0, y1));
        }
    }

    // Rails over everything.
    let half = (s.rail_width * w as f64 / 2.0).max(1.0);
    for &r in &s.rails {
        let cx = r * w as f64;
        let x0 = (cx - half).max(0.0).round() as u32;
        let x1 = ((cx + half).round() as u32).min(w);
        for x in x0..x1 {
            let shade = 1.0 - 0.25 * ((x as f64 - cx) / half).powi(2);
            for y in 0..h {
                let g = 185.0 * shade + rng.random_range(-4.0..4.0);
                image.put_pixel(x, y, Rgb([clamp8(g), clamp8(g), clamp8(g + 5.0)]));
                wood[(y * w + x) as usize] = false;
            }
        }
    }
    Scene { image, wood, bands }
}

/// The defect-free texture drawn for sample `index` of `label`.
pub fn render_base(spec: &SyntheticSpec, label: Label, index: usize) -> RgbImage {
    render_scene(spec, label, index).image
}

/// Image and ground-truth mask of one sample.
pub fn render_sample(spec: &SyntheticSpec, label: Label, index: usize) -> SyntheticSample {
    let (w, h) = (spec.width, spec.height);
    let Scene { mut image, wood, bands } = render_scene(spec, label, index);
    let mut mask = GrayImage::new(w, h);
    if label == Label::Anomalous {
        let mut rng = stream(spec, label, index, 1);
        let d = &spec.defect;
        let count = rng.random_range(d.blotch_count.0..=d.blotch_count.1);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 50 {
            attempts += 1;
            let (y0, y1) = bands[rng.random_range(0..bands.len())];
            let cy = rng.random_range(y0 as f64..y1 as f64);
            let cx = rng.random_range(0.0..w as f64);
            if !wood[(cy as u32 * w + cx as u32) as usize] {
                continue;
            }
            let r = rng.random_range(d.radius.0..=d.radius.1);
            let lobes: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..=5))
                .map(|_| {
                    (
                        cx + rng.random_range(-0.6..0.6) * r,
                        cy + rng.random_range(-0.4..0.4) * r,
                        r * rng.random_range(0.45..1.0),
                        r * rng.random_range(0.3..0.7),
                    )
                })
                .collect();
            let reach = 2.0 * r;
            let xs = (cx - reach).max(0.0) as u32..((cx + reach) as u32 + 1).min(w);
            let ys = (cy - reach).max(0.0) as u32..((cy + reach) as u32 + 1).min(h);
            let mut any = false;
            for y in ys {
                for x in xs.clone() {
                    if !wood[(y * w + x) as usize] {
                        continue;
                    }
                    let inside = lobes.iter().any(|&(lx, ly, ax, ay)| {
                        let dx = (x as f64 - lx) / ax;
                        let dy = (y as f64 - ly) / ay;
                        dx * dx + dy * dy <= 1.0
                    });
                    if inside {
                        mask.put_pixel(x, y, image::Luma([255]));
                        any = true;
                    }
                }
            }
            if any {
                placed += 1;
            }
        }
        if placed == 0 {
            // Fall back to a square patch on the first wood pixel of the widest band.
            let (y0, _) = bands.iter().copied().max_by_key(|(a, b)| b - a).expect("bands");
            let start = (y0 * w..h * w).find(|&i| wood[i as usize]).expect("wood pixel");
            let (sx, sy) = (start % w, start / w);
            for y in sy..(sy + 6).min(h) {
                for x in sx..(sx + 6).min(w) {
                    if wood[(y * w + x) as usize] {
                        mask.put_pixel(x, y, image::Luma([255]));
                    }
                }
            }
        }
        let c = d.contrast;
        for (x, y, m) in mask.enumerate_pixels() {
            if m.0[0] == 0 {
                continue;
            }
            let p = image.get_pixel_mut(x, y);
            let dark = 30.0 + rng.random_range(-10.0..10.0);
            let rgb = [dark + 6.0, dark + 2.0, dark - 4.0];
            for ch in 0..3 {
                p.0[ch] = clamp8(p.0[ch] as f64 * (1.0 - c) + rgb[ch] * c);
            }
        }
    }
    SyntheticSample {
        frame_id: spec.frame_id(label, index),
        label,
        image,
        mask,
    }
}

/// All samples of a spec, normals first.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let jobs: Vec<(Label, usize)> = (0..spec.normal_count)
        .map(|i| (Label::Normal, i))
        .chain((0..spec.anomalous_count).map(|i| (Label::Anomalous, i)))
        .collect();
    Ok(jobs.into_par_iter().map(|(l, i)| render_sample(spec, l, i)).collect())
}

/// Write a mask as a 1-bit grayscale PNG.
pub fn save_mask(mask: &GrayImage, path: &Path) -> Result<()> {
    let (w, h) = mask.dimensions();
    let file = std::fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let stride = w.div_ceil(8) as usize;
    let mut packed = vec![0u8; stride * h as usize];
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] > 127 {
            packed[y as usize * stride + x as usize / 8] |= 0x80 >> (x % 8);
        }
    }
    let err = |e: png::EncodingError| Error::Store(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&packed).map_err(err)?;
    writer.finish().map_err(err)
}

/// Read a mask; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)?.to_luma8();
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        image::Luma([if img.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }])
    }))
}

/// Render every sample to `out_dir` and return the manifest, with item paths
/// relative to `out_dir`. The manifest itself is saved as `manifest.jsonl`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images/normal", "images/anomalous", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).at(&d)?;
    }
    let jobs: Vec<(Label, usize)> = (0..spec.normal_count)
        .map(|i| (Label::Normal, i))
        .chain((0..spec.anomalous_count).map(|i| (Label::Anomalous, i)))
        .collect();
    let items: Vec<ManifestItem> = jobs
        .into_par_iter()
        .map(|(label, i)| {
            let s = render_sample(spec, label, i);
            let class = if label.is_anomalous() { "anomalous" } else { "normal" };
            let rel = PathBuf::from(format!("images/{class}/{}.png", s.frame_id));
            let mask_rel = PathBuf::from(format!("masks/{}.png", s.frame_id));
            let p = out_dir.join(&rel);
            s.image.save(&p)?;
            save_mask(&s.mask, &out_dir.join(&mask_rel))?;
            let mut item = ManifestItem::new(s.frame_id, rel, label);
            item.mask_path = Some(mask_rel);
            item.provenance = "synthetic".into();
            let slot = if label.is_anomalous() { spec.normal_count + i } else { i };
            item.position_m = spec.frame_spacing_m.map(|d| slot as f64 * d);
            Ok(item)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        items,
        sampling_plan: Some(SamplingPlan {
            imbalance_ratio: None,
            scale_step: None,
            normal_count: spec.normal_count,
            anomalous_count: spec.anomalous_count,
        }),
        seed: Some(spec.seed),
        provenance: vec![format!("synthetic {}×{} seed {}", spec.height, spec.width, spec.seed)],
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    std::fs::write(out_dir.join("synthetic.json"), serde_json::to_vec_pretty(spec)?).at(out_dir)?;
    Ok(manifest)
}
