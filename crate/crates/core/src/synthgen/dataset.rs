use std::ops::Range;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compose::{compose_with, validate};
use super::{CropAsset, PixelBox, SceneConfig, SynthError};
use crate::fsutil;
use crate::par::Execution;

pub const IMAGES_DIR: &str = "images";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One rendered scene as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    /// Path relative to the dataset root.
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub background: usize,
    pub boxes: Vec<PixelBox>,
    pub crop_ids: Vec<String>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub config: SceneConfig,
    pub annotations: String,
    pub total_boxes: usize,
    pub total_dropped: usize,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    pub description: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [u32; 4],
    pub area: u64,
    pub iscrowd: u8,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub info: CocoInfo,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn from_scenes(scenes: &[SceneRecord], seed: u64) -> Self {
        let mut images = Vec::with_capacity(scenes.len());
        let mut annotations = Vec::new();
        for s in scenes {
            let image_id = s.index as u64 + 1;
            images.push(CocoImage { id: image_id, file_name: s.file_name.clone(), width: s.width, height: s.height });
            for (b, crop) in s.boxes.iter().zip(&s.crop_ids) {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id,
                    category_id: 1,
                    bbox: [b.x_min, b.y_min, b.width(), b.height()],
                    area: b.area(),
                    iscrowd: 0,
                    source_id: crop.clone(),
                });
            }
        }
        CocoFile {
            info: CocoInfo { description: "synthetic insect scenes".into(), seed },
            images,
            annotations,
            categories: vec![CocoCategory { id: 1, name: "insect".into() }],
        }
    }
}

fn scene_file_name(index: usize) -> String {
    format!("{IMAGES_DIR}/scene_{index:06}.png")
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>, SynthError> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Adaptive).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

/// Renders scenes `range` into `out_dir/images`. Scene `i` draws from its own
/// generator seeded with `seed + i`, so any partition of the index space
/// produces the same scenes.
pub fn render_range(
    out_dir: &Path,
    backgrounds: &[RgbImage],
    crops: &[CropAsset],
    config: &SceneConfig,
    seed: u64,
    range: Range<usize>,
    exec: Execution,
) -> Result<Vec<SceneRecord>, SynthError> {
    if backgrounds.is_empty() {
        return Err(SynthError::Config("at least one background is required".into()));
    }
    let mut approved = Vec::new();
    for bg in backgrounds {
        approved = validate(bg, crops, config)?;
    }
    std::fs::create_dir_all(out_dir.join(IMAGES_DIR))?;

    let start = range.start;
    exec.try_map_range(range.len(), |offset| {
        let index = start + offset;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
        let background = rng.gen_range(0..backgrounds.len());
        let bg = &backgrounds[background];
        let scene = compose_with(bg, &approved, config, &mut rng);
        let file_name = scene_file_name(index);
        fsutil::write_atomic(&out_dir.join(&file_name), &encode_png(&scene.image)?)?;
        Ok(SceneRecord {
            index,
            file_name,
            width: bg.width(),
            height: bg.height(),
            background,
            boxes: scene.annotation.boxes,
            crop_ids: scene.annotation.crop_ids,
            dropped: scene.dropped,
        })
    })
}

/// Joins the outputs of several `render_range` calls. The parts must cover
/// `0..n` exactly once in total; order between parts does not matter.
pub fn merge_ranges(parts: Vec<Vec<SceneRecord>>) -> Result<Vec<SceneRecord>, SynthError> {
    let mut all: Vec<SceneRecord> = parts.into_iter().flatten().collect();
    all.sort_by_key(|s| s.index);
    for (expected, s) in all.iter().enumerate() {
        if s.index != expected {
            return Err(SynthError::Config(format!(
                "scene ranges do not tile the index space: expected scene {expected}, found {}",
                s.index
            )));
        }
    }
    Ok(all)
}

pub fn write_annotations(path: &Path, scenes: &[SceneRecord], seed: u64) -> Result<(), SynthError> {
    let coco = CocoFile::from_scenes(scenes, seed);
    fsutil::write_json_atomic(path, &coco)?;
    Ok(())
}

/// Renders `n_scenes` scenes and writes `annotations.json` and `manifest.json`
/// under `out_dir`.
pub fn generate_dataset(
    out_dir: &Path,
    backgrounds: &[RgbImage],
    crops: &[CropAsset],
    n_scenes: usize,
    config: &SceneConfig,
    seed: u64,
    exec: Execution,
) -> Result<DatasetManifest, SynthError> {
    let scenes = render_range(out_dir, backgrounds, crops, config, seed, 0..n_scenes, exec)?;
    finish_dataset(out_dir, scenes, config, seed)
}

/// Writes the annotation file and manifest for an already merged scene list.
pub fn finish_dataset(
    out_dir: &Path,
    scenes: Vec<SceneRecord>,
    config: &SceneConfig,
    seed: u64,
) -> Result<DatasetManifest, SynthError> {
    write_annotations(&out_dir.join(ANNOTATIONS_FILE), &scenes, seed)?;
    let manifest = DatasetManifest {
        seed,
        n_scenes: scenes.len(),
        config: config.clone(),
        annotations: ANNOTATIONS_FILE.into(),
        total_boxes: scenes.iter().map(|s| s.boxes.len()).sum(),
        total_dropped: scenes.iter().map(|s| s.dropped).sum(),
        scenes,
    };
    fsutil::write_json_atomic(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::ReviewState;
    use image::{Rgb, Rgba, RgbaImage};

    fn inputs() -> (Vec<RgbImage>, Vec<CropAsset>) {
        let bgs = vec![RgbImage::from_pixel(64, 48, Rgb([200, 200, 190])), RgbImage::from_pixel(70, 50, Rgb([180, 190, 200]))];
        let crops = vec![
            CropAsset::new(RgbaImage::from_pixel(8, 5, Rgba([20, 30, 40, 255])), "c1", ReviewState::Approved).unwrap(),
            CropAsset::new(RgbaImage::from_pixel(6, 6, Rgba([90, 10, 10, 255])), "c2", ReviewState::Approved).unwrap(),
        ];
        (bgs, crops)
    }

    #[test]
    fn deterministic_and_counts_match() {
        let (bgs, crops) = inputs();
        let cfg = SceneConfig { n_range: (0, 4), ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(a.path(), &bgs, &crops, 12, &cfg, 9, Execution::Parallel).unwrap();
        let mb = generate_dataset(b.path(), &bgs, &crops, 12, &cfg, 9, Execution::Sequential).unwrap();
        assert_eq!(ma, mb);
        let ja = std::fs::read(a.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(ja, std::fs::read(b.path().join(ANNOTATIONS_FILE)).unwrap());
        let coco: CocoFile = serde_json::from_slice(&ja).unwrap();
        assert_eq!(coco.images.len(), 12);
        assert_eq!(coco.annotations.len(), ma.total_boxes);
        for s in &ma.scenes {
            assert_eq!(
                std::fs::read(a.path().join(&s.file_name)).unwrap(),
                std::fs::read(b.path().join(&s.file_name)).unwrap()
            );
        }
    }

    #[test]
    fn split_ranges_merge_to_single_run() {
        let (bgs, crops) = inputs();
        let cfg = SceneConfig::default();
        let single = tempfile::tempdir().unwrap();
        let whole = render_range(single.path(), &bgs, &crops, &cfg, 77, 0..10, Execution::Sequential).unwrap();

        let split = tempfile::tempdir().unwrap();
        let late = render_range(split.path(), &bgs, &crops, &cfg, 77, 6..10, Execution::Parallel).unwrap();
        let early = render_range(split.path(), &bgs, &crops, &cfg, 77, 0..6, Execution::Parallel).unwrap();
        assert_eq!(merge_ranges(vec![late, early]).unwrap(), whole);
    }

    #[test]
    fn merge_rejects_gaps_and_overlaps() {
        let (bgs, crops) = inputs();
        let d = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let r = |range| render_range(d.path(), &bgs, &crops, &cfg, 1, range, Execution::Sequential).unwrap();
        assert!(merge_ranges(vec![r(0..3), r(4..6)]).is_err());
        assert!(merge_ranges(vec![r(0..3), r(2..6)]).is_err());
    }

    #[test]
    fn no_backgrounds_is_an_error() {
        let (_, crops) = inputs();
        let d = tempfile::tempdir().unwrap();
        assert!(render_range(d.path(), &[], &crops, &SceneConfig::default(), 0, 0..1, Execution::Sequential).is_err());
    }
}
