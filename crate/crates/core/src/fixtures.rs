//! Small on-disk fixture night: synthetic frames with a few dark "moths"
//! drifting across a light sheet, a stub model set whose canned outputs are
//! keyed to those frames, and a three-family backbone. Used by tests,
//! benches and the `ami demo` command.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::fsutil;
use crate::inference::{
    crop_for_model, BackendKind, BlobDetector, Fixture, FixtureSpecies, ModelSpec, Stage, StageSpecs,
};
use crate::taxonomy::{Backbone, Rank, TaxonKey, TaxonRecord, TaxonStatus};
use crate::ContentHash;

pub const SHEET: Rgb<u8> = Rgb([225, 225, 215]);
pub const FRAME_W: u32 = 192;
pub const FRAME_H: u32 = 144;

/// Species keys used by the fixture backbone, in label order.
pub const SPECIES: [TaxonKey; 3] = [1101, 1102, 1201];

struct Insect {
    color: Rgb<u8>,
    size: (u32, u32),
    start: (i64, i64),
    step: (i64, i64),
    /// Label index into `SPECIES`, `None` for the non-moth.
    species: Option<usize>,
}

fn insects() -> Vec<Insect> {
    vec![
        Insect { color: Rgb([90, 25, 20]), size: (18, 12), start: (12, 14), step: (6, 3), species: Some(0) },
        Insect { color: Rgb([20, 30, 95]), size: (16, 14), start: (150, 20), step: (-5, 4), species: Some(1) },
        Insect { color: Rgb([25, 80, 25]), size: (20, 12), start: (40, 110), step: (7, -2), species: Some(2) },
        // a beetle-like static blob the binary stage rejects
        Insect { color: Rgb([60, 60, 60]), size: (12, 12), start: (150, 115), step: (0, 0), species: None },
    ]
}

fn paint(frame: usize) -> (RgbImage, Vec<(Rgb<u8>, Option<usize>)>) {
    let mut img = RgbImage::from_pixel(FRAME_W, FRAME_H, SHEET);
    let mut present = Vec::new();
    for ins in insects() {
        let x0 = ins.start.0 + ins.step.0 * frame as i64;
        let y0 = ins.start.1 + ins.step.1 * frame as i64;
        let (w, h) = ins.size;
        if x0 < 0 || y0 < 0 || x0 + w as i64 > FRAME_W as i64 || y0 + h as i64 > FRAME_H as i64 {
            continue; // left the sheet
        }
        for y in y0..y0 + h as i64 {
            for x in x0..x0 + w as i64 {
                img.put_pixel(x as u32, y as u32, ins.color);
            }
        }
        present.push((ins.color, ins.species));
    }
    (img, present)
}

/// Frame rasters of the fixture night, in capture order.
pub fn frames(n: usize) -> Vec<RgbImage> {
    (0..n).map(|i| paint(i).0).collect()
}

pub fn backbone() -> Backbone {
    let r = |k, name: &str, rank, parent| TaxonRecord {
        taxon_key: k,
        scientific_name: name.to_string(),
        rank,
        status: TaxonStatus::Accepted,
        accepted_key: None,
        parent_key: parent,
    };
    Backbone::new([
        r(10, "Noctuidae", Rank::Family, None),
        r(20, "Geometridae", Rank::Family, None),
        r(110, "Agrotis", Rank::Genus, Some(10)),
        r(120, "Campaea", Rank::Genus, Some(20)),
        r(1101, "Agrotis ipsilon", Rank::Species, Some(110)),
        r(1102, "Agrotis segetum", Rank::Species, Some(110)),
        r(1201, "Campaea perlata", Rank::Species, Some(120)),
    ])
    .expect("fixture backbone is consistent")
}

#[derive(Debug, Clone)]
pub struct FixtureNight {
    /// Directory laid out as `<root>/<deployment>/<frames>`.
    pub root: PathBuf,
    pub deployment: String,
    pub frame_paths: Vec<PathBuf>,
    pub specs: StageSpecs,
    pub backbone_path: PathBuf,
}

/// Writes `n` frames for `deployment` under `dir/images`, captured every two
/// minutes from 22:00 on 2023-06-01, plus stub model files under
/// `dir/models`. Frames listed in `corrupt` are written as unreadable bytes.
pub fn write_night(dir: &Path, deployment: &str, n: usize, corrupt: &[usize]) -> io::Result<FixtureNight> {
    let root = dir.join("images");
    let dep_dir = root.join(deployment);
    let models = dir.join("models");
    std::fs::create_dir_all(&dep_dir)?;
    std::fs::create_dir_all(&models)?;

    let detector = BlobDetector::default();
    let res = crate::inference::DEFAULT_INPUT_RESOLUTION;
    let mut binary = Fixture::default();
    let mut species = Fixture { labels: SPECIES.to_vec(), ..Fixture::default() };
    let mut frame_paths = Vec::with_capacity(n);
    for i in 0..n {
        let start = chrono::NaiveDate::from_ymd_opt(2023, 6, 1).unwrap().and_hms_opt(22, 0, 0).unwrap();
        let t = start + chrono::Duration::minutes(2 * i as i64);
        let path = dep_dir.join(format!("{}.png", t.format("%Y%m%d-%H%M%S")));
        if corrupt.contains(&i) {
            std::fs::write(&path, b"not an image")?;
            frame_paths.push(path);
            continue;
        }
        let (img, present) = paint(i);
        let colors: BTreeMap<[u8; 3], Option<usize>> = present.into_iter().map(|(c, s)| (c.0, s)).collect();
        for (bbox, _) in detector.detect_image(&img) {
            let (cx, cy) = bbox.center();
            let c = img.get_pixel(cx as u32, cy as u32).0;
            let (crop, _) = crop_for_model(&img, &bbox, res).map_err(io::Error::other)?;
            let key = ContentHash::of_raster(&crop).to_hex();
            match colors.get(&c).copied().flatten() {
                Some(label) => {
                    binary.moth_probability.insert(key.clone(), 0.9);
                    let mut probabilities = vec![0.05; SPECIES.len()];
                    probabilities[label] = 0.9;
                    let mut feature = vec![0.1f32; 4];
                    feature[label] = 1.0;
                    species.species.insert(key, FixtureSpecies { probabilities, feature });
                }
                None => {
                    binary.moth_probability.insert(key, 0.1);
                }
            }
        }
        img.save(&path).map_err(io::Error::other)?;
        frame_paths.push(path);
    }

    let binary_path = models.join("binary.json");
    let species_path = models.join("species.json");
    fsutil::write_json_atomic(&binary_path, &binary)?;
    fsutil::write_json_atomic(&species_path, &species)?;
    let backbone_path = models.join("backbone.csv");
    let mut buf = Vec::new();
    backbone().write_csv(&mut buf).map_err(io::Error::other)?;
    fsutil::write_atomic(&backbone_path, &buf)?;

    let specs = StageSpecs {
        detector: ModelSpec::new(Stage::Detector, BackendKind::Blob, "blob"),
        binary: ModelSpec::new(Stage::Binary, BackendKind::StubFixture, binary_path.display().to_string()),
        species: Some(ModelSpec::new(Stage::Species, BackendKind::StubFixture, species_path.display().to_string())),
        life_stage: None,
    };
    Ok(FixtureNight { root, deployment: deployment.to_string(), frame_paths, specs, backbone_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::LoadedStages;

    #[test]
    fn stub_models_cover_every_crop() {
        let dir = tempfile::tempdir().unwrap();
        let night = write_night(dir.path(), "trap1", 6, &[]).unwrap();
        let stages = LoadedStages::load(&night.specs).unwrap();
        for (i, p) in night.frame_paths.iter().enumerate() {
            let img = crate::inference::load_image(p).unwrap();
            let dets = stages.run(&img, 3).unwrap();
            assert_eq!(dets.iter().filter(|d| d.is_moth()).count(), 3, "frame {i}");
            assert_eq!(dets.len(), 4);
        }
    }
}
