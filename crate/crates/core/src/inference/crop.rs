use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, InferenceError};

/// Maps classifier-input pixels back to source-image pixels:
/// `x = origin_x + u * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
    /// Integer region of the source image the crop was cut from.
    pub region: [u32; 4],
}

impl CropTransform {
    pub fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (self.origin_x + u * self.scale, self.origin_y + v * self.scale)
    }
}

/// Cuts `bbox` out of `image` (clamped to the image, snapped outward to whole
/// pixels), pads it to a square by replicating its edge pixels and resizes it
/// to `resolution` x `resolution`.
pub fn crop_for_model(
    image: &RgbImage,
    bbox: &BoundingBox,
    resolution: u32,
) -> Result<(RgbImage, CropTransform), InferenceError> {
    if resolution == 0 {
        return Err(InferenceError::Config("crop resolution must be positive".into()));
    }
    let (iw, ih) = image.dimensions();
    let b = bbox
        .clamp_to(iw, ih)
        .ok_or_else(|| InferenceError::Input(format!("box {bbox:?} lies outside the {iw}x{ih} image")))?;
    let x0 = b.x_min.floor() as u32;
    let y0 = b.y_min.floor() as u32;
    let x1 = (b.x_max.ceil() as u32).min(iw).max(x0 + 1);
    let y1 = (b.y_max.ceil() as u32).min(ih).max(y0 + 1);
    let (w, h) = (x1 - x0, y1 - y0);
    let side = w.max(h);
    let pad_l = (side - w) / 2;
    let pad_t = (side - h) / 2;

    let square = RgbImage::from_fn(side, side, |i, j| {
        let sx = (x0 as i64 + i as i64 - pad_l as i64).clamp(x0 as i64, x1 as i64 - 1);
        let sy = (y0 as i64 + j as i64 - pad_t as i64).clamp(y0 as i64, y1 as i64 - 1);
        *image.get_pixel(sx as u32, sy as u32)
    });
    let out = if side == resolution {
        square
    } else {
        imageops::resize(&square, resolution, resolution, imageops::FilterType::Triangle)
    };
    let transform = CropTransform {
        origin_x: x0 as f64 - pad_l as f64,
        origin_y: y0 as f64 - pad_t as f64,
        scale: side as f64 / resolution as f64,
        region: [x0, y0, x1, y1],
    };
    Ok((out, transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn square_box_at_native_size_is_a_plain_cut() {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([x as u8, y as u8, 7]));
        let (c, t) = crop_for_model(&img, &BoundingBox::new(10.0, 5.0, 26.0, 21.0).unwrap(), 16).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!(c.get_pixel(0, 0), &Rgb([10, 5, 7]));
        assert_eq!(c.get_pixel(15, 15), &Rgb([25, 20, 7]));
    }

    #[test]
    fn padding_replicates_edges() {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([x as u8, y as u8, 0]));
        // 4 wide, 8 tall: two columns of padding each side
        let (c, t) = crop_for_model(&img, &BoundingBox::new(10.0, 10.0, 14.0, 18.0).unwrap(), 8).unwrap();
        assert_eq!(t.origin_x, 8.0);
        assert_eq!(c.get_pixel(0, 3), &Rgb([10, 13, 0]));
        assert_eq!(c.get_pixel(1, 3), &Rgb([10, 13, 0]));
        assert_eq!(c.get_pixel(2, 3), &Rgb([10, 13, 0]));
        assert_eq!(c.get_pixel(7, 3), &Rgb([13, 13, 0]));
    }

    #[test]
    fn outside_box_is_input_error() {
        let img = RgbImage::new(10, 10);
        let r = crop_for_model(&img, &BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap(), 8);
        assert!(matches!(r, Err(InferenceError::Input(_))));
    }

    proptest! {
        #[test]
        fn mapped_crop_stays_within_padded_box(
            iw in 1u32..120, ih in 1u32..120,
            x in -20.0f64..140.0, y in -20.0f64..140.0,
            w in 0.5f64..90.0, h in 0.5f64..90.0,
            res in 1u32..64,
        ) {
            let img = RgbImage::new(iw, ih);
            let bbox = BoundingBox::new(x, y, x + w, y + h).unwrap();
            match crop_for_model(&img, &bbox, res) {
                Ok((c, t)) => {
                    prop_assert_eq!(c.dimensions(), (res, res));
                    let [x0, y0, x1, y1] = t.region;
                    let (cw, ch) = ((x1 - x0) as f64, (y1 - y0) as f64);
                    // odd padding puts the extra column/row after the box
                    let margin_x = ((cw.max(ch) - cw) / 2.0).ceil();
                    let margin_y = ((cw.max(ch) - ch) / 2.0).ceil();
                    let (ax, ay) = t.to_image(0.0, 0.0);
                    let (bx, by) = t.to_image(res as f64, res as f64);
                    // region covers the clamped box, snapped outward by under a pixel
                    let clamped = bbox.clamp_to(iw, ih).unwrap();
                    prop_assert!(x0 as f64 <= clamped.x_min && clamped.x_max <= x1 as f64);
                    prop_assert!(clamped.x_min - x0 as f64 <= 1.0 && x1 as f64 - clamped.x_max <= 1.0);
                    let eps = 1e-9;
                    prop_assert!(ax >= x0 as f64 - margin_x - eps && bx <= x1 as f64 + margin_x + eps);
                    prop_assert!(ay >= y0 as f64 - margin_y - eps && by <= y1 as f64 + margin_y + eps);
                }
                Err(InferenceError::Input(_)) => prop_assert!(bbox.clamp_to(iw, ih).is_none()),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }
}
