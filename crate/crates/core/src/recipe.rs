//! Static training recipe for the species classifier. Nothing here trains;
//! the file is emitted next to exported manifests so an external trainer
//! can pick it up.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dwca::DEFAULT_CAP_PER_SPECIES;
use crate::fsutil;
use crate::inference::DEFAULT_INPUT_RESOLUTION;

pub const RECIPE_FILE: &str = "training_recipe.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandAugment {
    pub n: u32,
    pub m: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub architecture: String,
    pub pretrained: String,
    pub input_resolution: [u32; 2],
    pub optimizer: String,
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub warmup_epochs: u32,
    pub epochs: u32,
    pub weight_decay: f64,
    pub randaugment: RandAugment,
    pub label_smoothing: f64,
    pub augmentations: Vec<String>,
    pub max_images_per_species: usize,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        TrainingRecipe {
            architecture: "resnet50".into(),
            pretrained: "imagenet-1k".into(),
            input_resolution: [DEFAULT_INPUT_RESOLUTION, DEFAULT_INPUT_RESOLUTION],
            optimizer: "adamw".into(),
            learning_rate: 0.001,
            lr_schedule: "cosine".into(),
            warmup_epochs: 2,
            epochs: 30,
            weight_decay: 1e-5,
            randaugment: RandAugment { n: 2, m: 9 },
            label_smoothing: 0.1,
            augmentations: ["random_crop", "random_horizontal_flip", "randaugment", "mixed_resolution"]
                .map(String::from)
                .to_vec(),
            max_images_per_species: DEFAULT_CAP_PER_SPECIES,
        }
    }
}

/// Writes the default recipe into `dir` and returns its path.
pub fn write_recipe(dir: &Path) -> std::io::Result<std::path::PathBuf> {
    let path = dir.join(RECIPE_FILE);
    fsutil::write_json_atomic(&path, &TrainingRecipe::default())?;
    Ok(path)
}
