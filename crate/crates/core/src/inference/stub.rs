use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{
    BinaryBackend, BoundingBox, DetectorBackend, InferenceError, LifeStageBackend, ModelSpec, SpeciesBackend,
    SpeciesOutput,
};
use crate::taxonomy::TaxonKey;
use crate::ContentHash;

/// Key used when no entry matches the raster hash.
pub const DEFAULT_ENTRY: &str = "default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBox {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpecies {
    pub probabilities: Vec<f64>,
    pub feature: Vec<f32>,
}

/// Canned outputs keyed by the hex content hash of the input raster
/// (`ContentHash::of_raster`): the full frame for the detector, the
/// model-input crop for the classifiers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fixture {
    /// Species label map, in output order.
    pub labels: Vec<TaxonKey>,
    pub detections: BTreeMap<String, Vec<FixtureBox>>,
    pub moth_probability: BTreeMap<String, f64>,
    pub species: BTreeMap<String, FixtureSpecies>,
    pub adult_probability: BTreeMap<String, f64>,
}

pub struct StubBackend {
    fixture: Fixture,
    spec: ModelSpec,
}

impl StubBackend {
    pub fn load(spec: &ModelSpec) -> Result<Self, InferenceError> {
        let text = std::fs::read_to_string(&spec.model_uri).map_err(|e| spec.stage_error(format!("reading fixture: {e}")))?;
        let fixture: Fixture = serde_json::from_str(&text).map_err(|e| spec.stage_error(format!("parsing fixture: {e}")))?;
        Ok(Self::from_fixture(fixture, spec))
    }

    pub fn from_fixture(fixture: Fixture, spec: &ModelSpec) -> Self {
        StubBackend { fixture, spec: spec.clone() }
    }

    fn lookup<'a, T>(&self, map: &'a BTreeMap<String, T>, image: &RgbImage) -> Result<&'a T, InferenceError> {
        let hash = ContentHash::of_raster(image).to_hex();
        map.get(&hash)
            .or_else(|| map.get(DEFAULT_ENTRY))
            .ok_or_else(|| self.spec.stage_error(format!("no fixture entry for raster {hash}")))
    }
}

impl DetectorBackend for StubBackend {
    fn detect(&self, image: &RgbImage) -> Result<Vec<(BoundingBox, f64)>, InferenceError> {
        self.lookup(&self.fixture.detections, image)?
            .iter()
            .map(|f| {
                let [a, b, c, d] = f.bbox;
                let bbox = BoundingBox::new(a, b, c, d).map_err(|e| self.spec.stage_error(e.to_string()))?;
                Ok((bbox, f.score))
            })
            .collect()
    }
}

impl BinaryBackend for StubBackend {
    fn moth_probability(&self, crop: &RgbImage) -> Result<f64, InferenceError> {
        self.lookup(&self.fixture.moth_probability, crop).copied()
    }
}

impl SpeciesBackend for StubBackend {
    fn labels(&self) -> &[TaxonKey] {
        &self.fixture.labels
    }

    fn predict(&self, crop: &RgbImage) -> Result<SpeciesOutput, InferenceError> {
        let s = self.lookup(&self.fixture.species, crop)?;
        Ok(SpeciesOutput { probabilities: s.probabilities.clone(), feature: s.feature.clone() })
    }
}

impl LifeStageBackend for StubBackend {
    fn adult_probability(&self, image: &RgbImage) -> Result<f64, InferenceError> {
        self.lookup(&self.fixture.adult_probability, image).copied()
    }
}
