use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Cropped,
    Resized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowClass {
    Shadow,
    WholeDark,
    WithoutShadow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClass {
    Grassy,
    DecayedSleeper,
    NormalNoGrass,
}

impl ShadowClass {
    pub const ALL: [ShadowClass; 3] = [ShadowClass::Shadow, ShadowClass::WholeDark, ShadowClass::WithoutShadow];
}

impl SurfaceClass {
    pub const ALL: [SurfaceClass; 3] = [SurfaceClass::Grassy, SurfaceClass::DecayedSleeper, SurfaceClass::NormalNoGrass];
}

/// Scene annotations from the optional pre-filters, with softmax confidences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub shadow: Option<(ShadowClass, f64)>,
    pub surface: Option<(SurfaceClass, f64)>,
}

/// One image sample with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub source_video_id: String,
    pub frame_index: u64,
    pub pixels: RgbImage,
    pub track_position: Option<f64>,
    pub stage: Stage,
    pub scene_labels: Option<SceneLabel>,
}

impl Frame {
    pub fn new(frame_id: impl Into<String>, pixels: RgbImage, stage: Stage) -> Self {
        Self {
            frame_id: frame_id.into(),
            source_video_id: String::new(),
            frame_index: 0,
            pixels,
            track_position: None,
            stage,
            scene_labels: None,
        }
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (u32, u32) {
        let (w, h) = self.pixels.dimensions();
        (h, w)
    }
}

/// Placement of the crop window within the source frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropAnchor {
    /// Horizontal shift from the centred position, pixels (positive = right).
    pub x_offset: i64,
    /// Upward shift from the bottom edge, pixels.
    pub bottom_margin: u32,
}

impl Default for CropAnchor {
    fn default() -> Self {
        Self {
            x_offset: 0,
            bottom_margin: 0,
        }
    }
}

/// Crop `rows×cols` horizontally centred and anchored to the bottom edge.
pub fn crop_frame(frame: &Frame, rows: u32, cols: u32, anchor: CropAnchor) -> Result<Frame> {
    let (h, w) = frame.dims();
    if rows == 0 || cols == 0 {
        return Err(Error::Precondition("crop dimensions must be positive".into()));
    }
    if h < rows + anchor.bottom_margin || w < cols {
        return Err(Error::Precondition(format!(
            "frame `{}` is {h}×{w}, smaller than the {rows}×{cols} crop",
            frame.frame_id
        )));
    }
    let x = (w - cols) as i64 / 2 + anchor.x_offset;
    if x < 0 || x as u32 + cols > w {
        return Err(Error::Precondition(format!("horizontal crop offset {} leaves the frame", anchor.x_offset)));
    }
    let y = h - rows - anchor.bottom_margin;
    let pixels = imageops::crop_imm(&frame.pixels, x as u32, y, cols, rows).to_image();
    Ok(Frame {
        pixels,
        stage: Stage::Cropped,
        ..frame.clone()
    })
}

/// Bilinear resize to `side×side`.
pub fn resize_frame(frame: &Frame, side: u32) -> Result<Frame> {
    if side == 0 {
        return Err(Error::Precondition("resize side must be positive".into()));
    }
    let pixels = if frame.pixels.dimensions() == (side, side) {
        frame.pixels.clone()
    } else {
        imageops::resize(&frame.pixels, side, side, imageops::FilterType::Triangle)
    };
    Ok(Frame {
        pixels,
        stage: Stage::Resized,
        ..frame.clone()
    })
}
