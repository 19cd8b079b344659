//! Copy-paste synthetic detection scenes: reviewed insect crops pasted onto
//! empty trap backgrounds with right-angle rotations and flips, recording the
//! exact pasted extent of each crop.

mod augment;
mod compose;
mod crops;
mod dataset;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

pub use augment::{Augmentation, Rotation};
pub use compose::{compose_scene, mask_extent, Placement, Scene, ALPHA_CUTOFF};
pub use crops::{CropInfo, CropStore};
pub use dataset::{
    finish_dataset, generate_dataset, merge_ranges, render_range, write_annotations, CocoAnnotation, CocoCategory, CocoFile,
    CocoImage, CocoInfo, DatasetManifest, SceneRecord, ANNOTATIONS_FILE, IMAGES_DIR, MANIFEST_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    #[default]
    Unreviewed,
    Approved,
    Rejected,
}

/// A segmented insect cut out of a trap image. Alpha is the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CropAsset {
    pub image: RgbaImage,
    pub source_id: String,
    pub review_state: ReviewState,
}

impl CropAsset {
    pub fn new(image: RgbaImage, source_id: impl Into<String>, review_state: ReviewState) -> Result<Self, SynthError> {
        let source_id = source_id.into();
        if image.width() == 0 || image.height() == 0 {
            return Err(SynthError::Config(format!("crop {source_id} has zero area")));
        }
        Ok(CropAsset { image, source_id, review_state })
    }
}

/// Integer pixel box, half-open: covers columns `x_min..x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min)) as u64;
        let iy = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min)) as u64;
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub boxes: Vec<PixelBox>,
    pub crop_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub rotations: Vec<Rotation>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip: true, rotations: Rotation::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Inclusive range of crops per scene.
    pub n_range: (usize, usize),
    pub allow_overlap: bool,
    /// Only consulted when `allow_overlap` is false.
    pub max_overlap_iou: f64,
    pub augment: AugmentConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { n_range: (1, 10), allow_overlap: true, max_overlap_iou: 0.0, augment: AugmentConfig::default() }
    }
}

/// Placement attempts per crop before it is dropped from a non-overlapping scene.
pub const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no approved crops available for a scene needing {0} crop(s)")]
    NoApprovedCrops(usize),
    #[error("crop {source_id} is {crop_w}x{crop_h} after augmentation but the background is {bg_w}x{bg_h}")]
    CropTooLarge { source_id: String, crop_w: u32, crop_h: u32, bg_w: u32, bg_h: u32 },
    #[error("crop {0} not found")]
    UnknownCrop(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
