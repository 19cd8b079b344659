use image::{GrayImage, RgbImage};

use super::{BoundingBox, DetectorBackend, InferenceError};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobParams {
    /// Minimum absolute grey-level difference from the background (0-255).
    pub threshold: u8,
    /// Minimum component size in pixels.
    pub min_area: usize,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams { threshold: 40, min_area: 100 }
    }
}

impl BlobParams {
    /// Parses `blob` or `blob:threshold=40,min_area=100` (either key optional).
    pub fn from_uri(uri: &str) -> Result<Self, InferenceError> {
        let mut p = BlobParams::default();
        let rest = match uri.split_once(':') {
            Some(("blob", rest)) => rest,
            None if uri == "blob" || uri.is_empty() => return Ok(p),
            _ => return Err(InferenceError::Config(format!("blob model_uri {uri:?} must look like blob:threshold=N,min_area=N"))),
        };
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let bad = || InferenceError::Config(format!("bad blob parameter {kv:?}"));
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k.trim() {
                "threshold" => p.threshold = v.trim().parse().map_err(|_| bad())?,
                "min_area" => p.min_area = v.trim().parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        if p.threshold == 0 {
            return Err(InferenceError::Config("blob threshold must be at least 1".into()));
        }
        Ok(p)
    }
}

/// Classical background-subtraction detector: pixels whose grey level differs
/// from the image median by at least `threshold` are foreground; 8-connected
/// foreground components of at least `min_area` pixels become boxes.
#[derive(Debug, Clone, Default)]
pub struct BlobDetector {
    pub params: BlobParams,
}

fn median(gray: &GrayImage) -> u8 {
    let mut hist = [0usize; 256];
    for p in gray.pixels() {
        hist[p[0] as usize] += 1;
    }
    let target = (gray.len() - 1) / 2;
    let mut seen = 0;
    for (v, &c) in hist.iter().enumerate() {
        seen += c;
        if seen > target {
            return v as u8;
        }
    }
    0
}

impl BlobDetector {
    pub fn new(params: BlobParams) -> Self {
        BlobDetector { params }
    }

    pub fn detect_image(&self, image: &RgbImage) -> Vec<(BoundingBox, f64)> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Vec::new();
        }
        let gray = image::imageops::grayscale(image);
        let bg = median(&gray) as i16;
        let diff: Vec<u8> = gray.pixels().map(|p| (p[0] as i16 - bg).unsigned_abs() as u8).collect();
        let thr = self.params.threshold;
        let (wu, hu) = (w as usize, h as usize);
        let mut seen = vec![false; diff.len()];
        let mut stack = Vec::new();
        let mut out = Vec::new();

        for start in 0..diff.len() {
            if seen[start] || diff[start] < thr {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let mut area = 0usize;
            let mut sum = 0u64;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % wu, i / wu);
                area += 1;
                sum += diff[i] as u64;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                for ny in y.saturating_sub(1)..(y + 2).min(hu) {
                    for nx in x.saturating_sub(1)..(x + 2).min(wu) {
                        let j = ny * wu + nx;
                        if !seen[j] && diff[j] >= thr {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            if area >= self.params.min_area {
                let mean = sum as f64 / area as f64;
                let score = (mean / (2.0 * thr as f64)).min(1.0);
                let b = BoundingBox { x_min: x0 as f64, y_min: y0 as f64, x_max: x1 as f64, y_max: y1 as f64 };
                out.push((b, score));
            }
        }
        out
    }

    pub fn detect_batch(&self, images: &[RgbImage], exec: Execution) -> Vec<Vec<(BoundingBox, f64)>> {
        exec.map_slice(images, |img| self.detect_image(img))
    }
}

impl DetectorBackend for BlobDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<(BoundingBox, f64)>, InferenceError> {
        Ok(self.detect_image(image))
    }
}
