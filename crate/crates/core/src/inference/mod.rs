//! Staged prediction over pluggable backends: detector, moth/non-moth
//! classifier, species classifier and an optional life-stage classifier.

mod blob;
mod crop;
#[cfg(feature = "onnx")]
mod onnx;
mod stages;
mod stub;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::taxonomy::TaxonKey;

pub use blob::{BlobDetector, BlobParams};
pub use crop::{crop_for_model, CropTransform};
pub use stages::{
    binary_with, classify_binary, classify_species, detect, detect_with, run_stages, species_with, LifeStageFilter,
    LoadedStages, StageSpecs,
};
pub use stub::{Fixture, FixtureBox, FixtureSpecies, StubBackend};

pub const DEFAULT_INPUT_RESOLUTION: u32 = 128;
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DETECTOR_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Binary,
    Species,
    LifeStage,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Detector => "detector",
            Stage::Binary => "binary",
            Stage::Species => "species",
            Stage::LifeStage => "life_stage",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    StubFixture,
    Blob,
    ExternalRuntime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stage: Stage,
    pub backend: BackendKind,
    pub model_uri: String,
    pub threshold: f64,
    #[serde(default = "default_resolution")]
    pub input_resolution: u32,
}

fn default_resolution() -> u32 {
    DEFAULT_INPUT_RESOLUTION
}

impl ModelSpec {
    pub fn new(stage: Stage, backend: BackendKind, model_uri: impl Into<String>) -> Self {
        let threshold = match stage {
            Stage::Detector => DEFAULT_DETECTOR_THRESHOLD,
            _ => DEFAULT_BINARY_THRESHOLD,
        };
        ModelSpec { stage, backend, model_uri: model_uri.into(), threshold, input_resolution: DEFAULT_INPUT_RESOLUTION }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(InferenceError::Config(format!("{} threshold {} outside [0, 1]", self.stage, self.threshold)));
        }
        if self.input_resolution == 0 {
            return Err(InferenceError::Config(format!("{} input_resolution must be positive", self.stage)));
        }
        if self.backend == BackendKind::Blob && self.stage != Stage::Detector {
            return Err(InferenceError::Config("the blob backend only provides a detector".into()));
        }
        Ok(())
    }

    pub(crate) fn expect_stage(&self, stage: Stage) -> Result<(), InferenceError> {
        if self.stage != stage {
            return Err(InferenceError::Config(format!("expected a {stage} spec, got {}", self.stage)));
        }
        self.validate()
    }

    pub(crate) fn stage_error(&self, message: impl Into<String>) -> InferenceError {
        InferenceError::Stage { stage: self.stage, model_uri: self.model_uri.clone(), message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    /// Backend load, IO or output-shape failure.
    #[error("{stage} stage ({model_uri}): {message}")]
    Stage { stage: Stage, model_uri: String, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Pixel box with floating-point edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, InferenceError> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        if [x_min, y_min, x_max, y_max].iter().any(|v| !v.is_finite()) || x_min >= x_max || y_min >= y_max {
            return Err(InferenceError::Input(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Intersection with `[0, w] x [0, h]`, or `None` if nothing is left.
    pub fn clamp_to(&self, w: u32, h: u32) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(w as f64),
            y_max: self.y_max.min(h as f64),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Moth,
    NonMoth,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Moth => "moth",
            BinaryLabel::NonMoth => "non_moth",
        }
    }
}

impl FromStr for BinaryLabel {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moth" => Ok(BinaryLabel::Moth),
            "non_moth" | "nonmoth" | "non-moth" => Ok(BinaryLabel::NonMoth),
            other => Err(InferenceError::Input(format!("unknown binary label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryResult {
    pub label: BinaryLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesScore {
    pub taxon_key: TaxonKey,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Position in the detector output for this image.
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub det_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<Vec<SpeciesScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
}

impl Detection {
    pub fn is_moth(&self) -> bool {
        matches!(self.binary, Some(BinaryResult { label: BinaryLabel::Moth, .. }))
    }

    pub fn top_species(&self) -> Option<&SpeciesScore> {
        self.species.as_ref().and_then(|s| s.first())
    }
}

/// Raw species classifier output: one probability per label plus an
/// embedding (not yet normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesOutput {
    pub probabilities: Vec<f64>,
    pub feature: Vec<f32>,
}

// Backends must be `Send + Sync`: every backend here is stateless after
// loading, so one instance is shared by all worker threads.

pub trait DetectorBackend: Send + Sync {
    /// Candidate boxes in image pixels with scores in [0, 1], in any order.
    fn detect(&self, image: &RgbImage) -> Result<Vec<(BoundingBox, f64)>, InferenceError>;
}

pub trait BinaryBackend: Send + Sync {
    fn moth_probability(&self, crop: &RgbImage) -> Result<f64, InferenceError>;
}

pub trait SpeciesBackend: Send + Sync {
    /// Taxon keys in output order.
    fn labels(&self) -> &[TaxonKey];
    fn predict(&self, crop: &RgbImage) -> Result<SpeciesOutput, InferenceError>;
}

pub trait LifeStageBackend: Send + Sync {
    fn adult_probability(&self, image: &RgbImage) -> Result<f64, InferenceError>;
}

fn unsupported(spec: &ModelSpec) -> InferenceError {
    spec.stage_error(format!("backend {:?} cannot serve the {} stage", spec.backend, spec.stage))
}

pub fn load_detector(spec: &ModelSpec) -> Result<Box<dyn DetectorBackend>, InferenceError> {
    spec.expect_stage(Stage::Detector)?;
    match spec.backend {
        BackendKind::Blob => Ok(Box::new(BlobDetector::new(BlobParams::from_uri(&spec.model_uri)?))),
        BackendKind::StubFixture => Ok(Box::new(StubBackend::load(spec)?)),
        BackendKind::ExternalRuntime => external::detector(spec),
    }
}

pub fn load_binary(spec: &ModelSpec) -> Result<Box<dyn BinaryBackend>, InferenceError> {
    spec.expect_stage(Stage::Binary)?;
    match spec.backend {
        BackendKind::StubFixture => Ok(Box::new(StubBackend::load(spec)?)),
        BackendKind::ExternalRuntime => external::binary(spec),
        BackendKind::Blob => Err(unsupported(spec)),
    }
}

pub fn load_species(spec: &ModelSpec) -> Result<Box<dyn SpeciesBackend>, InferenceError> {
    spec.expect_stage(Stage::Species)?;
    match spec.backend {
        BackendKind::StubFixture => Ok(Box::new(StubBackend::load(spec)?)),
        BackendKind::ExternalRuntime => external::species(spec),
        BackendKind::Blob => Err(unsupported(spec)),
    }
}

pub fn load_life_stage(spec: &ModelSpec) -> Result<Box<dyn LifeStageBackend>, InferenceError> {
    spec.expect_stage(Stage::LifeStage)?;
    match spec.backend {
        BackendKind::StubFixture => Ok(Box::new(StubBackend::load(spec)?)),
        BackendKind::ExternalRuntime => external::life_stage(spec),
        BackendKind::Blob => Err(unsupported(spec)),
    }
}

#[cfg(feature = "onnx")]
mod external {
    pub(super) use super::onnx::{binary, detector, life_stage, species};
}

#[cfg(not(feature = "onnx"))]
mod external {
    use super::*;

    fn missing<T>(spec: &ModelSpec) -> Result<T, InferenceError> {
        Err(spec.stage_error("external_runtime backend not compiled in (enable the `onnx` feature)"))
    }

    pub(super) fn detector(spec: &ModelSpec) -> Result<Box<dyn DetectorBackend>, InferenceError> {
        missing(spec)
    }

    pub(super) fn binary(spec: &ModelSpec) -> Result<Box<dyn BinaryBackend>, InferenceError> {
        missing(spec)
    }

    pub(super) fn species(spec: &ModelSpec) -> Result<Box<dyn SpeciesBackend>, InferenceError> {
        missing(spec)
    }

    pub(super) fn life_stage(spec: &ModelSpec) -> Result<Box<dyn LifeStageBackend>, InferenceError> {
        missing(spec)
    }
}

/// Decodes a JPEG or PNG file into RGB, sniffing the format from content.
pub fn load_image(path: &Path) -> Result<RgbImage, InferenceError> {
    let bytes = std::fs::read(path).map_err(|e| InferenceError::Input(format!("{}: {e}", path.display())))?;
    decode_image(&bytes).map_err(|e| InferenceError::Input(format!("{}: {e}", path.display())))
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, InferenceError> {
    let img = image::load_from_memory(bytes).map_err(|e| InferenceError::Input(format!("image decode: {e}")))?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_defaults_and_validation() {
        let d = ModelSpec::new(Stage::Detector, BackendKind::Blob, "blob");
        assert_eq!(d.input_resolution, 128);
        assert_eq!(d.threshold, 0.5);
        assert!(d.validate().is_ok());
        assert!(d.clone().with_threshold(1.5).validate().is_err());
        let b = ModelSpec::new(Stage::Binary, BackendKind::Blob, "blob");
        assert!(matches!(load_binary(&b), Err(InferenceError::Config(_))));
        assert!(matches!(load_species(&d), Err(InferenceError::Config(_))));
    }

    #[test]
    fn bounding_box_rules() {
        assert!(BoundingBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 2.0).is_err());
        let b = BoundingBox::new(-5.0, 2.0, 30.0, 8.0).unwrap();
        assert_eq!(b.clamp_to(20, 20), Some(BoundingBox { x_min: 0.0, y_min: 2.0, x_max: 20.0, y_max: 8.0 }));
        assert_eq!(b.clamp_to(20, 2), None);
    }

    #[test]
    fn spec_json_uses_snake_case() {
        let s = ModelSpec::new(Stage::LifeStage, BackendKind::ExternalRuntime, "m.onnx");
        let j = serde_json::to_value(&s).unwrap();
        assert_eq!(j["stage"], "life_stage");
        assert_eq!(j["backend"], "external_runtime");
        let back: ModelSpec = serde_json::from_str(r#"{"stage":"binary","backend":"stub_fixture","model_uri":"f.json","threshold":0.4}"#).unwrap();
        assert_eq!(back.input_resolution, 128);
    }

    #[cfg(not(feature = "onnx"))]
    #[test]
    fn external_runtime_reports_missing_feature() {
        let s = ModelSpec::new(Stage::Species, BackendKind::ExternalRuntime, "m.onnx");
        match load_species(&s) {
            Err(InferenceError::Stage { model_uri, .. }) => assert_eq!(model_uri, "m.onnx"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("loaded"),
        }
    }
}
