//! Frame sources. Video containers are consumed as decoded image sequences
//! (one image file per frame, ordered by file name).

use std::path::{Path, PathBuf};

use image::RgbImage;

use super::{Frame, Stage};
use crate::{Error, Result};

pub trait FrameSource {
    fn video_id(&self) -> &str;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, index: usize) -> Result<Frame>;
}

/// Frame indices kept when taking every `step`-th frame.
pub fn subsample_indices(total: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::Precondition("subsampling step must be at least 1".into()));
    }
    Ok((0..total).step_by(step).collect())
}

/// Every `step`-th frame starting at index 0, with chainage interpolated
/// linearly between `positions` (start, end) when given.
pub fn subsample_frames(source: &dyn FrameSource, step: usize, positions: Option<(f64, f64)>) -> Result<Vec<Frame>> {
    let total = source.len();
    subsample_indices(total, step)?
        .into_iter()
        .map(|i| {
            let mut f = source.frame(i)?;
            if let Some((start, end)) = positions {
                f.track_position = Some(interpolate_position(i, total, start, end));
            }
            Ok(f)
        })
        .collect()
}

pub fn interpolate_position(index: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    start + (end - start) * index as f64 / (total - 1) as f64
}

/// Directory of decoded frames.
pub struct ImageSequence {
    video_id: String,
    files: Vec<PathBuf>,
}

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

impl ImageSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let unreadable = |reason: String| Error::UnreadableSource {
            path: dir.to_path_buf(),
            reason,
        };
        let entries = std::fs::read_dir(dir).map_err(|e| unreadable(e.to_string()))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(unreadable("no frame images found".into()));
        }
        let video_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        Ok(Self { video_id, files })
    }
}

impl FrameSource for ImageSequence {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn len(&self) -> usize {
        self.files.len()
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = &self.files[index];
        let img = image::open(path).map_err(|e| Error::UnreadableSource {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(Frame {
            frame_id: format!("{}/{index:06}", self.video_id),
            source_video_id: self.video_id.clone(),
            frame_index: index as u64,
            pixels: img.to_rgb8(),
            track_position: None,
            stage: Stage::Raw,
            scene_labels: None,
        })
    }
}

/// Frames held in memory.
pub struct InMemoryVideo {
    pub video_id: String,
    pub frames: Vec<RgbImage>,
}

impl FrameSource for InMemoryVideo {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        Ok(Frame {
            frame_id: format!("{}/{index:06}", self.video_id),
            source_video_id: self.video_id.clone(),
            frame_index: index as u64,
            pixels: self.frames[index].clone(),
            track_position: None,
            stage: Stage::Raw,
            scene_labels: None,
        })
    }
}
