//! `external_runtime` backend: ONNX models executed with tract.
//!
//! Every model takes one `1x3xRxR` f32 input (RGB scaled to [0, 1], then
//! ImageNet mean/std normalized) where R is the spec's input resolution.
//! Outputs per stage:
//! - detector: `boxes [N, 4]` as (x_min, y_min, x_max, y_max) in [0, 1] of
//!   the frame, then `scores [N]`
//! - binary / life_stage: class logits; a sidecar lists the label names and
//!   must contain `moth` (resp. `adult`); a single logit is read as a sigmoid
//! - species: class logits, then a feature vector; the sidecar lists the
//!   taxon keys in output order
//!
//! The sidecar is `<model_uri>.labels.json`.

use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use tract_onnx::prelude::*;

use super::{
    BinaryBackend, BoundingBox, DetectorBackend, InferenceError, LifeStageBackend, ModelSpec, SpeciesBackend,
    SpeciesOutput,
};
use crate::taxonomy::TaxonKey;

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

struct OnnxModel {
    plan: TypedRunnableModel<TypedModel>,
    spec: ModelSpec,
}

pub fn sidecar_path(model_uri: &str) -> PathBuf {
    PathBuf::from(format!("{model_uri}.labels.json"))
}

fn read_sidecar<T: serde::de::DeserializeOwned>(spec: &ModelSpec) -> Result<T, InferenceError> {
    let path = sidecar_path(&spec.model_uri);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| spec.stage_error(format!("reading label map {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| spec.stage_error(format!("parsing label map {}: {e}", path.display())))
}

impl OnnxModel {
    fn load(spec: &ModelSpec) -> Result<Self, InferenceError> {
        let r = spec.input_resolution as usize;
        let err = |e: TractError| spec.stage_error(format!("{e:#}"));
        let plan = tract_onnx::onnx()
            .model_for_path(Path::new(&spec.model_uri))
            .map_err(err)?
            .with_input_fact(0, f32::fact([1, 3, r, r]).into())
            .map_err(err)?
            .into_optimized()
            .map_err(err)?
            .into_runnable()
            .map_err(err)?;
        Ok(OnnxModel { plan, spec: spec.clone() })
    }

    fn run(&self, image: &RgbImage) -> Result<Vec<Vec<f32>>, InferenceError> {
        let r = self.spec.input_resolution;
        let resized;
        let img = if image.dimensions() == (r, r) {
            image
        } else {
            resized = imageops::resize(image, r, r, imageops::FilterType::Triangle);
            &resized
        };
        let ru = r as usize;
        let input: Tensor = tract_ndarray::Array4::from_shape_fn((1, 3, ru, ru), |(_, c, y, x)| {
            let v = img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
            (v - MEAN[c]) / STD[c]
        })
        .into();
        let outputs = self.plan.run(tvec!(input.into())).map_err(|e| self.spec.stage_error(format!("{e:#}")))?;
        outputs
            .iter()
            .map(|t| {
                let view = t.to_array_view::<f32>().map_err(|e| self.spec.stage_error(format!("{e:#}")))?;
                Ok(view.iter().copied().collect())
            })
            .collect()
    }

    fn output(&self, outputs: &[Vec<f32>], i: usize) -> Result<Vec<f32>, InferenceError> {
        outputs.get(i).cloned().ok_or_else(|| self.spec.stage_error(format!("model has no output {i}")))
    }
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability of the class named `positive` among `labels`.
fn class_probability(
    spec: &ModelSpec,
    logits: &[f32],
    labels: &[String],
    positive: &str,
) -> Result<f64, InferenceError> {
    if logits.len() == 1 {
        return Ok(1.0 / (1.0 + (-logits[0] as f64).exp()));
    }
    if logits.len() != labels.len() {
        return Err(spec.stage_error(format!("{} logits but {} labels", logits.len(), labels.len())));
    }
    let i = labels
        .iter()
        .position(|l| l == positive)
        .ok_or_else(|| spec.stage_error(format!("label map has no {positive:?} entry")))?;
    Ok(softmax(logits)[i])
}

struct Detector {
    model: OnnxModel,
}

impl DetectorBackend for Detector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<(BoundingBox, f64)>, InferenceError> {
        let out = self.model.run(image)?;
        let boxes = self.model.output(&out, 0)?;
        let scores = self.model.output(&out, 1)?;
        if boxes.len() != scores.len() * 4 {
            return Err(self.model.spec.stage_error(format!("{} box values for {} scores", boxes.len(), scores.len())));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut dets = Vec::new();
        for (b, &s) in boxes.chunks_exact(4).zip(&scores) {
            let bx = BoundingBox {
                x_min: b[0] as f64 * w,
                y_min: b[1] as f64 * h,
                x_max: b[2] as f64 * w,
                y_max: b[3] as f64 * h,
            };
            // degenerate boxes are dropped rather than failing the frame
            if bx.x_min < bx.x_max && bx.y_min < bx.y_max {
                dets.push((bx, s as f64));
            }
        }
        Ok(dets)
    }
}

struct Binary {
    model: OnnxModel,
    labels: Vec<String>,
    positive: &'static str,
}

impl Binary {
    fn probability(&self, image: &RgbImage) -> Result<f64, InferenceError> {
        let out = self.model.run(image)?;
        class_probability(&self.model.spec, &self.model.output(&out, 0)?, &self.labels, self.positive)
    }
}

impl BinaryBackend for Binary {
    fn moth_probability(&self, crop: &RgbImage) -> Result<f64, InferenceError> {
        self.probability(crop)
    }
}

impl LifeStageBackend for Binary {
    fn adult_probability(&self, image: &RgbImage) -> Result<f64, InferenceError> {
        self.probability(image)
    }
}

struct Species {
    model: OnnxModel,
    labels: Vec<TaxonKey>,
}

impl SpeciesBackend for Species {
    fn labels(&self) -> &[TaxonKey] {
        &self.labels
    }

    fn predict(&self, crop: &RgbImage) -> Result<SpeciesOutput, InferenceError> {
        let out = self.model.run(crop)?;
        let logits = self.model.output(&out, 0)?;
        let feature = self.model.output(&out, 1)?;
        Ok(SpeciesOutput { probabilities: softmax(&logits), feature })
    }
}

fn binary_labels(spec: &ModelSpec) -> Result<Vec<String>, InferenceError> {
    if sidecar_path(&spec.model_uri).exists() {
        read_sidecar(spec)
    } else {
        Ok(Vec::new())
    }
}

pub fn detector(spec: &ModelSpec) -> Result<Box<dyn DetectorBackend>, InferenceError> {
    Ok(Box::new(Detector { model: OnnxModel::load(spec)? }))
}

pub fn binary(spec: &ModelSpec) -> Result<Box<dyn BinaryBackend>, InferenceError> {
    Ok(Box::new(Binary { labels: binary_labels(spec)?, model: OnnxModel::load(spec)?, positive: "moth" }))
}

pub fn life_stage(spec: &ModelSpec) -> Result<Box<dyn LifeStageBackend>, InferenceError> {
    Ok(Box::new(Binary { labels: binary_labels(spec)?, model: OnnxModel::load(spec)?, positive: "adult" }))
}

pub fn species(spec: &ModelSpec) -> Result<Box<dyn SpeciesBackend>, InferenceError> {
    let labels = read_sidecar(spec)?;
    Ok(Box::new(Species { model: OnnxModel::load(spec)?, labels }))
}
