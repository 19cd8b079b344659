use std::cmp::Ordering;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{
    crop_for_model, load_binary, load_detector, load_life_stage, load_species, BinaryBackend, BinaryLabel,
    BinaryResult, BoundingBox, Detection, DetectorBackend, InferenceError, LifeStageBackend, ModelSpec,
    SpeciesBackend, SpeciesScore, Stage,
};
use crate::dwca::{LifeStageJudge, MediaCache, MediaRecord};
use crate::par::Execution;

/// One spec per stage. The species stage is optional; without it moths keep
/// only their binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpecs {
    pub detector: ModelSpec,
    pub binary: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub life_stage: Option<ModelSpec>,
}

impl StageSpecs {
    pub fn validate(&self) -> Result<(), InferenceError> {
        self.detector.expect_stage(Stage::Detector)?;
        self.binary.expect_stage(Stage::Binary)?;
        if let Some(s) = &self.species {
            s.expect_stage(Stage::Species)?;
        }
        if let Some(s) = &self.life_stage {
            s.expect_stage(Stage::LifeStage)?;
        }
        Ok(())
    }
}

fn check_unit(spec: &ModelSpec, what: &str, v: f64) -> Result<f64, InferenceError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(spec.stage_error(format!("{what} {v} outside [0, 1]")))
    }
}

/// Filters raw detector output: boxes are clamped to the image, scores below
/// the spec threshold are dropped and the rest sorted by descending score.
pub fn detect_with(
    backend: &dyn DetectorBackend,
    spec: &ModelSpec,
    image: &RgbImage,
) -> Result<Vec<(BoundingBox, f64)>, InferenceError> {
    spec.expect_stage(Stage::Detector)?;
    let (w, h) = image.dimensions();
    let mut out = Vec::new();
    for (b, score) in backend.detect(image)? {
        let score = check_unit(spec, "detector score", score)?;
        if score < spec.threshold {
            continue;
        }
        if let Some(b) = b.clamp_to(w, h) {
            out.push((b, score));
        }
    }
    out.sort_by(|(ba, sa), (bb, sb)| {
        sb.total_cmp(sa)
            .then(ba.y_min.total_cmp(&bb.y_min))
            .then(ba.x_min.total_cmp(&bb.x_min))
            .then(ba.y_max.total_cmp(&bb.y_max))
            .then(ba.x_max.total_cmp(&bb.x_max))
    });
    Ok(out)
}

pub fn detect(image: &RgbImage, spec: &ModelSpec) -> Result<Vec<(BoundingBox, f64)>, InferenceError> {
    detect_with(&*load_detector(spec)?, spec, image)
}

pub fn binary_with(backend: &dyn BinaryBackend, spec: &ModelSpec, crop: &RgbImage) -> Result<BinaryResult, InferenceError> {
    spec.expect_stage(Stage::Binary)?;
    let p = check_unit(spec, "moth probability", backend.moth_probability(crop)?)?;
    Ok(if p >= spec.threshold {
        BinaryResult { label: BinaryLabel::Moth, score: p }
    } else {
        BinaryResult { label: BinaryLabel::NonMoth, score: 1.0 - p }
    })
}

pub fn classify_binary(crop: &RgbImage, spec: &ModelSpec) -> Result<BinaryResult, InferenceError> {
    binary_with(&*load_binary(spec)?, spec, crop)
}

/// Top-`k` species (ties broken by smaller taxon key) and the unit-norm feature.
pub fn species_with(
    backend: &dyn SpeciesBackend,
    spec: &ModelSpec,
    crop: &RgbImage,
    k: usize,
) -> Result<(Vec<SpeciesScore>, Vec<f32>), InferenceError> {
    spec.expect_stage(Stage::Species)?;
    if k == 0 {
        return Err(InferenceError::Config("top-k must be at least 1".into()));
    }
    let out = backend.predict(crop)?;
    let labels = backend.labels();
    if out.probabilities.len() != labels.len() {
        return Err(spec.stage_error(format!(
            "backend returned {} probabilities but the label map has {} entries",
            out.probabilities.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for &p in &out.probabilities {
        total += check_unit(spec, "species probability", p)?;
    }
    if total > 1.0 + 1e-6 {
        return Err(spec.stage_error(format!("species probabilities sum to {total}")));
    }
    let mut ranked: Vec<SpeciesScore> = labels
        .iter()
        .zip(&out.probabilities)
        .map(|(&taxon_key, &probability)| SpeciesScore { taxon_key, probability })
        .collect();
    ranked.sort_by(|a, b| match b.probability.total_cmp(&a.probability) {
        Ordering::Equal => a.taxon_key.cmp(&b.taxon_key),
        o => o,
    });
    ranked.truncate(k);

    let norm = out.feature.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if out.feature.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(spec.stage_error("feature vector is empty, zero or non-finite"));
    }
    let feature = out.feature.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok((ranked, feature))
}

pub fn classify_species(
    crop: &RgbImage,
    spec: &ModelSpec,
    k: usize,
) -> Result<(Vec<SpeciesScore>, Vec<f32>), InferenceError> {
    species_with(&*load_species(spec)?, spec, crop, k)
}

/// Backends loaded once and shared by every image of a run.
pub struct LoadedStages {
    pub specs: StageSpecs,
    detector: Box<dyn DetectorBackend>,
    binary: Box<dyn BinaryBackend>,
    species: Option<Box<dyn SpeciesBackend>>,
}

impl LoadedStages {
    pub fn load(specs: &StageSpecs) -> Result<Self, InferenceError> {
        specs.validate()?;
        Ok(LoadedStages {
            specs: specs.clone(),
            detector: load_detector(&specs.detector)?,
            binary: load_binary(&specs.binary)?,
            species: specs.species.as_ref().map(load_species).transpose()?,
        })
    }

    /// Detect, crop, classify moth/non-moth, then classify species for moths only.
    pub fn run(&self, image: &RgbImage, k: usize) -> Result<Vec<Detection>, InferenceError> {
        let boxes = detect_with(&*self.detector, &self.specs.detector, image)?;
        let mut out = Vec::with_capacity(boxes.len());
        for (index, (bbox, det_score)) in boxes.into_iter().enumerate() {
            let res = self.specs.binary.input_resolution;
            let (crop, _) = crop_for_model(image, &bbox, res)?;
            let binary = binary_with(&*self.binary, &self.specs.binary, &crop)?;
            let mut det = Detection { index, bbox, det_score, binary: Some(binary), species: None, feature: None };
            if let (BinaryLabel::Moth, Some(backend), Some(spec)) = (binary.label, &self.species, &self.specs.species) {
                let crop = if spec.input_resolution == res { crop } else { crop_for_model(image, &bbox, spec.input_resolution)?.0 };
                let (species, feature) = species_with(&**backend, spec, &crop, k)?;
                det.species = Some(species);
                det.feature = Some(feature);
            }
            out.push(det);
        }
        Ok(out)
    }

    pub fn run_batch(&self, images: &[RgbImage], k: usize, exec: Execution) -> Vec<Result<Vec<Detection>, InferenceError>> {
        exec.map_slice(images, |img| self.run(img, k))
    }
}

pub fn run_stages(image: &RgbImage, specs: &StageSpecs, k: usize) -> Result<Vec<Detection>, InferenceError> {
    LoadedStages::load(specs)?.run(image, k)
}

/// Plugs a life-stage classifier into archive cleaning: the cached media
/// object is classified whole and counts as adult when the adult
/// probability reaches the spec threshold.
pub struct LifeStageFilter {
    spec: ModelSpec,
    backend: Box<dyn LifeStageBackend>,
    cache: MediaCache,
}

impl LifeStageFilter {
    pub fn load(spec: &ModelSpec, cache: MediaCache) -> Result<Self, InferenceError> {
        Ok(LifeStageFilter { spec: spec.clone(), backend: load_life_stage(spec)?, cache })
    }

    pub fn adult_probability(&self, image: &RgbImage) -> Result<f64, InferenceError> {
        let whole = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: image.width() as f64, y_max: image.height() as f64 };
        let (crop, _) = crop_for_model(image, &whole, self.spec.input_resolution)?;
        check_unit(&self.spec, "adult probability", self.backend.adult_probability(&crop)?)
    }
}

impl LifeStageJudge for LifeStageFilter {
    fn is_adult(&self, media: &MediaRecord) -> Result<bool, String> {
        let hash = media.content_hash.ok_or_else(|| format!("{} has not been fetched", media.url))?;
        let image = super::load_image(&self.cache.object_path(&hash)).map_err(|e| e.to_string())?;
        let p = self.adult_probability(&image).map_err(|e| e.to_string())?;
        Ok(p >= self.spec.threshold)
    }
}
