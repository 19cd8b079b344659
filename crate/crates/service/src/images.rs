use std::io::Cursor;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue};
use axum::response::{IntoResponse, Response};
use image::{DynamicImage, ImageFormat};

use crate::{blocking, ApiError, AppState, ErrorCode};
use ami_core::inference::load_image;

fn split_index(id: &str) -> Result<(&str, usize), ApiError> {
    let (head, tail) = id.rsplit_once(':').ok_or_else(|| ApiError::invalid(format!("malformed id {id:?}")))?;
    let i = tail.parse().map_err(|_| ApiError::invalid(format!("malformed id {id:?}")))?;
    Ok((head, i))
}

/// JPEG when the client asks for it and not for PNG; PNG otherwise.
fn negotiate(headers: &HeaderMap) -> ImageFormat {
    let accept = headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).unwrap_or("");
    if accept.contains("image/jpeg") && !accept.contains("image/png") {
        ImageFormat::Jpeg
    } else {
        ImageFormat::Png
    }
}

fn encode(img: DynamicImage, format: ImageFormat) -> Result<Response, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    let img = if format == ImageFormat::Jpeg { DynamicImage::ImageRgb8(img.to_rgb8()) } else { img };
    img.write_to(&mut buf, format)
        .map_err(|e| ApiError::new(ErrorCode::BackendFailure, format!("encoding image: {e}")))?;
    let ct = if format == ImageFormat::Jpeg { "image/jpeg" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static(ct))], buf.into_inner()).into_response())
}

/// `GET /api/frames/{session_id}:{index}/image`
pub(crate) async fn frame_image(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let format = negotiate(&headers);
    let img = blocking(&s, move |e| {
        let (sid, i) = split_index(&id)?;
        let session = e.session(sid)?;
        let frame = session.frames.get(i).ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("frame {id}")))?;
        load_image(&frame.path).map_err(|err| ApiError::new(ErrorCode::BackendFailure, err.to_string()))
    })
    .await?;
    encode(DynamicImage::ImageRgb8(img), format)
}

/// `GET /api/detections/{session_id}:{frame}:{detection}/crop`, from the
/// session's latest completed results.
pub(crate) async fn detection_crop(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let format = negotiate(&headers);
    let img = blocking(&s, move |e| {
        let (frame_id, d) = split_index(&id)?;
        let (sid, f) = split_index(frame_id)?;
        let not_found = || ApiError::new(ErrorCode::NotFound, format!("detection {id}"));
        let records = e.detections(sid)?;
        let rec = records.iter().find(|r| r.frame_index == f).ok_or_else(not_found)?;
        let det = rec.detections.iter().find(|x| x.index == d).ok_or_else(not_found)?;
        let frame = load_image(&rec.path).map_err(|err| ApiError::new(ErrorCode::BackendFailure, err.to_string()))?;
        let b = det.bbox.clamp_to(frame.width(), frame.height()).ok_or_else(not_found)?;
        let (x0, y0) = (b.x_min.floor() as u32, b.y_min.floor() as u32);
        let (x1, y1) = (b.x_max.ceil() as u32, b.y_max.ceil() as u32);
        Ok(image::imageops::crop_imm(&frame, x0, y0, (x1 - x0).max(1), (y1 - y0).max(1)).to_image())
    })
    .await?;
    encode(DynamicImage::ImageRgb8(img), format)
}
