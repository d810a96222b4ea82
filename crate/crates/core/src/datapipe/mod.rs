//! From inspection video to labelled, split datasets.

mod frame;
pub mod manifest;
pub mod scene;
pub mod synth;
pub mod video;

use std::path::Path;

pub use frame::{crop_frame, resize_frame, CropAnchor, Frame, SceneLabel, ShadowClass, Stage, SurfaceClass};
pub use manifest::{
    largest_remainder, placeholder_pool, pool_datasets, sample_imbalanced, sample_scaled, split_manifest, DatasetManifest,
    ImbalanceDesign, Label, ManifestItem, SamplingPlan, ScaleDesign, Split,
};
pub use scene::{scene_filter_apply, scene_filter_train, PartitionReport, SceneClassifier, SceneTask, SceneTrainConfig};
pub use synth::{generate_synthetic, load_mask, render_base, render_sample, synthesize, SyntheticSample, SyntheticSpec};
pub use video::{subsample_frames, FrameSource, ImageSequence, InMemoryVideo};

use crate::{Error, Result};

/// Read a manifest item from disk and bring it to `side²`.
pub fn load_item(item: &ManifestItem, side: u32) -> Result<Frame> {
    let img = image::open(&item.path).map_err(|e| Error::UnreadableSource {
        path: item.path.clone(),
        reason: e.to_string(),
    })?;
    let mut frame = Frame::new(item.frame_id.clone(), img.to_rgb8(), Stage::Cropped);
    frame.track_position = item.position_m;
    resize_frame(&frame, side)
}

/// Load a manifest, resolving relative item paths against its directory.
pub fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(path)?;
    if let Some(dir) = path.parent() {
        m.resolve_paths(dir);
    }
    Ok(m)
}
