use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CropAsset, ReviewState, SynthError};
use crate::fsutil;

const REVIEW_FILE: &str = "review.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub review_state: ReviewState,
}

/// A directory of RGBA PNG crops. The crop id is the file stem; review
/// states live in `review.json` next to the images.
#[derive(Debug, Clone)]
pub struct CropStore {
    dir: PathBuf,
}

impl CropStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SynthError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(SynthError::Config(format!("crop directory {} does not exist", dir.display())));
        }
        Ok(CropStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn states(&self) -> Result<BTreeMap<String, ReviewState>, SynthError> {
        match fsutil::read_to_string_opt(&self.dir.join(REVIEW_FILE))? {
            Some(s) => Ok(serde_json::from_str(&s)?),
            None => Ok(BTreeMap::new()),
        }
    }

    fn ids(&self) -> Result<Vec<String>, SynthError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    fn check_id(&self, id: &str) -> Result<PathBuf, SynthError> {
        let valid = !id.is_empty() && !id.contains(['/', '\\']) && id != "." && id != "..";
        let path = self.image_path(id);
        if valid && path.is_file() {
            Ok(path)
        } else {
            Err(SynthError::UnknownCrop(id.to_string()))
        }
    }

    pub fn list(&self) -> Result<Vec<CropInfo>, SynthError> {
        let states = self.states()?;
        self.ids()?.into_iter().map(|id| self.info_with(&id, &states)).collect()
    }

    fn info_with(&self, id: &str, states: &BTreeMap<String, ReviewState>) -> Result<CropInfo, SynthError> {
        let path = self.check_id(id)?;
        let (width, height) = image::image_dimensions(&path)?;
        let review_state = states.get(id).copied().unwrap_or_default();
        Ok(CropInfo { id: id.to_string(), width, height, review_state })
    }

    pub fn info(&self, id: &str) -> Result<CropInfo, SynthError> {
        self.info_with(id, &self.states()?)
    }

    pub fn get(&self, id: &str) -> Result<CropAsset, SynthError> {
        let path = self.check_id(id)?;
        let image = image::open(&path)?.to_rgba8();
        let state = self.states()?.get(id).copied().unwrap_or_default();
        CropAsset::new(image, id, state)
    }

    pub fn set_state(&self, id: &str, state: ReviewState) -> Result<CropInfo, SynthError> {
        self.check_id(id)?;
        let mut states = self.states()?;
        states.insert(id.to_string(), state);
        fsutil::write_json_atomic(&self.dir.join(REVIEW_FILE), &states)?;
        self.info_with(id, &states)
    }

    pub fn load_approved(&self) -> Result<Vec<CropAsset>, SynthError> {
        let states = self.states()?;
        let mut out = Vec::new();
        for id in self.ids()? {
            if states.get(&id) == Some(&ReviewState::Approved) {
                let image = image::open(self.image_path(&id))?.to_rgba8();
                out.push(CropAsset::new(image, id, ReviewState::Approved)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgba, RgbaImage};

    fn store() -> (tempfile::TempDir, CropStore) {
        let dir = tempfile::tempdir().unwrap();
        for (id, w) in [("a", 4), ("b", 6)] {
            RgbaImage::from_pixel(w, 3, Rgba([1, 2, 3, 255])).save(dir.path().join(format!("{id}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let s = CropStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn review_round_trip() {
        let (_d, s) = store();
        let l = s.list().unwrap();
        assert_eq!(l.len(), 2);
        assert!(l.iter().all(|c| c.review_state == ReviewState::Unreviewed));
        assert_eq!(l[1].width, 6);

        s.set_state("b", ReviewState::Approved).unwrap();
        s.set_state("a", ReviewState::Rejected).unwrap();
        let approved = s.load_approved().unwrap();
        assert_eq!(approved.len(), 1);
        assert_eq!(approved[0].source_id, "b");
        assert_eq!(s.get("a").unwrap().review_state, ReviewState::Rejected);
    }

    #[test]
    fn unknown_ids() {
        let (_d, s) = store();
        assert!(matches!(s.get("zzz"), Err(SynthError::UnknownCrop(_))));
        assert!(matches!(s.set_state("../a", ReviewState::Approved), Err(SynthError::UnknownCrop(_))));
    }
}
