//! Linking moth detections across consecutive frames of a night and counting
//! individuals per species.

mod assign;
mod session;

use serde::{Deserialize, Serialize};

use crate::inference::{BoundingBox, Detection};
use crate::par::Execution;
use crate::taxonomy::TaxonomyError;

pub use assign::{assign, Assignment, CostMatrix};
pub use session::{
    consensus, count_individuals, read_tracks_jsonl, track_session, write_tracks_jsonl, Consensus, SpeciesCounts,
    Track, TrackItem, TrackLine,
};

pub const DEFAULT_GATE: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum TrackingError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Weights of the four link-cost terms, normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_iou: f64,
    pub w_size: f64,
    pub w_dist: f64,
    pub w_feat: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { w_iou: 0.25, w_size: 0.25, w_dist: 0.25, w_feat: 0.25 }
    }
}

impl CostWeights {
    pub fn new(w_iou: f64, w_size: f64, w_dist: f64, w_feat: f64) -> Result<Self, TrackingError> {
        let ws = [w_iou, w_size, w_dist, w_feat];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrackingError::Input(format!("weights {ws:?} must be finite and non-negative")));
        }
        let sum: f64 = ws.iter().sum();
        if sum <= 0.0 {
            return Err(TrackingError::Input("weights sum to zero".into()));
        }
        Ok(CostWeights { w_iou: w_iou / sum, w_size: w_size / sum, w_dist: w_dist / sum, w_feat: w_feat / sum })
    }

    /// Re-normalizes weights that came from deserialization.
    pub fn normalized(self) -> Result<Self, TrackingError> {
        Self::new(self.w_iou, self.w_size, self.w_dist, self.w_feat)
    }
}

/// Area of intersection over area of union; 0 for disjoint or empty boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64, TrackingError> {
    if a.len() != b.len() {
        return Err(TrackingError::Input(format!("feature lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite() && dot.is_finite()) {
        return Err(TrackingError::Input("zero or non-finite feature vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Link cost in [0, 1] between two detections:
/// `w_iou (1 - iou) + w_size (1 - min area / max area)
///  + w_dist min(centre distance / diag, 1) + w_feat (1 - cos) / 2`.
/// A missing feature on either side makes the last term `w_feat * 0.5`.
pub fn pairwise_cost(a: &Detection, b: &Detection, w: &CostWeights, image_diag: f64) -> Result<f64, TrackingError> {
    if !(image_diag > 0.0 && image_diag.is_finite()) {
        return Err(TrackingError::Input(format!("image diagonal {image_diag} must be positive")));
    }
    let (aa, ab) = (a.bbox.area(), b.bbox.area());
    if !(aa > 0.0 && ab > 0.0) {
        return Err(TrackingError::Input("zero-area box".into()));
    }
    let size = 1.0 - aa.min(ab) / aa.max(ab);
    let (ca, cb) = (a.bbox.center(), b.bbox.center());
    let dist = ((ca.0 - cb.0).hypot(ca.1 - cb.1) / image_diag).min(1.0);
    let feat = match (&a.feature, &b.feature) {
        (Some(fa), Some(fb)) => (1.0 - cosine(fa, fb)?) / 2.0,
        _ => 0.5,
    };
    let cost = w.w_iou * (1.0 - iou(&a.bbox, &b.bbox)) + w.w_size * size + w.w_dist * dist + w.w_feat * feat;
    Ok(cost.clamp(0.0, 1.0))
}

/// Costs between `prev` (rows) and `next` (columns).
pub fn cost_matrix(
    prev: &[&Detection],
    next: &[Detection],
    w: &CostWeights,
    image_diag: f64,
    exec: Execution,
) -> Result<CostMatrix, TrackingError> {
    let m = next.len();
    let data = exec.try_map_range(prev.len() * m, |i| pairwise_cost(prev[i / m], &next[i % m], w, image_diag))?;
    CostMatrix::new(prev.len(), m, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn det(x0: f64, y0: f64, x1: f64, y1: f64, feature: Option<Vec<f32>>) -> Detection {
        Detection {
            index: 0,
            bbox: BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 },
            det_score: 1.0,
            binary: None,
            species: None,
            feature,
        }
    }

    #[test]
    fn iou_cases() {
        let a = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 10.0, y_max: 10.0 };
        let b = BoundingBox { x_min: 5.0, y_min: 5.0, x_max: 15.0, y_max: 15.0 };
        assert_eq!(iou(&a, &b), 25.0 / 175.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BoundingBox { x_min: 20.0, y_min: 20.0, x_max: 30.0, y_max: 30.0 };
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn weights_normalize() {
        let w = CostWeights::new(1.0, 1.0, 2.0, 0.0).unwrap();
        assert_eq!((w.w_iou, w.w_dist, w.w_feat), (0.25, 0.5, 0.0));
        assert!(CostWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(CostWeights::new(-1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn cost_examples() {
        let w = CostWeights::default();
        let f = Some(vec![0.3f32, 0.4]);
        let a = det(0.0, 0.0, 10.0, 10.0, f.clone());
        assert!(pairwise_cost(&a, &a, &w, 100.0).unwrap() < 1e-12);

        // opposite corners of a 100x100 frame, centres a full diagonal apart
        let diag = 2f64.sqrt() * 100.0;
        let tl = det(-5.0, -5.0, 5.0, 5.0, f.clone());
        let br = det(95.0, 95.0, 105.0, 105.0, f);
        assert!((pairwise_cost(&tl, &br, &w, diag).unwrap() - 0.5).abs() < 1e-12);

        let only_feat = CostWeights::new(0.0, 0.0, 0.0, 1.0).unwrap();
        let x = det(0.0, 0.0, 10.0, 10.0, Some(vec![1.0, 0.0]));
        let y = det(0.0, 0.0, 10.0, 10.0, Some(vec![0.0, 1.0]));
        assert!((pairwise_cost(&x, &y, &only_feat, 50.0).unwrap() - 0.5).abs() < 1e-12);
        let none = det(0.0, 0.0, 10.0, 10.0, None);
        assert_eq!(pairwise_cost(&x, &none, &only_feat, 50.0).unwrap(), 0.5);
    }

    #[test]
    fn cost_input_errors() {
        let w = CostWeights::default();
        let a = det(0.0, 0.0, 10.0, 10.0, None);
        let flat = det(0.0, 0.0, 10.0, 0.0, None);
        assert!(pairwise_cost(&a, &flat, &w, 10.0).is_err());
        assert!(pairwise_cost(&a, &a, &w, 0.0).is_err());
        let f2 = det(0.0, 0.0, 10.0, 10.0, Some(vec![1.0, 0.0]));
        let f3 = det(0.0, 0.0, 10.0, 10.0, Some(vec![1.0, 0.0, 0.0]));
        assert!(pairwise_cost(&f2, &f3, &w, 10.0).is_err());
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0.0f64..200.0, 0.0f64..200.0, 0.5f64..80.0, 0.5f64..80.0, proptest::option::of(proptest::collection::vec(-1.0f32..1.0, 4)))
            .prop_map(|(x, y, w, h, f)| {
                let f = f.filter(|v| v.iter().any(|c| *c != 0.0));
                det(x, y, x + w, y + h, f)
            })
    }

    proptest! {
        #[test]
        fn cost_bounded_and_symmetric(a in arb_det(), b in arb_det(), ws in proptest::array::uniform4(0.0f64..1.0)) {
            prop_assume!(ws.iter().sum::<f64>() > 0.0);
            let w = CostWeights::new(ws[0], ws[1], ws[2], ws[3]).unwrap();
            let ab = pairwise_cost(&a, &b, &w, 300.0).unwrap();
            let ba = pairwise_cost(&b, &a, &w, 300.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn iou_properties(a in arb_det(), b in arb_det()) {
            let (x, y) = (iou(&a.bbox, &b.bbox), iou(&b.bbox, &a.bbox));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(iou(&a.bbox, &a.bbox), 1.0);
        }
    }
}
