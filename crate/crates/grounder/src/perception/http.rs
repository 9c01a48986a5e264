//! Thin HTTP clients for perception model servers.
//!
//! These adapt a detection/segmentation service with a simple multipart
//! protocol to the [`Detector`]/[`Segmenter`] traits. They are plain
//! blocking clients with no retry logic; the pipeline's fixture
//! implementations are used whenever determinism is required.
//!
//! Detector endpoint: `POST <base_url>/detect` with multipart fields
//! `image` (PNG bytes) and `params` (JSON `{"class": "<label>"}`);
//! the response is a JSON array `[{"label": ..., "box": [x0,y0,x1,y1],
//! "score": ...}]`.
//!
//! Segmenter endpoint: `POST <base_url>/segment` with multipart fields
//! `image` (PNG bytes) and `params` (JSON `{"box": [x0,y0,x1,y1]}`);
//! the response is an 8-bit gray PNG where nonzero pixels are mask-true.

use std::io::Cursor;
use std::time::Duration;

use image::RgbImage;
use serde::Deserialize;

use super::{BBox2, Detection2D, Detector, Mask2D, PerceptionError, Segmenter};
use crate::scene::Frame;

fn png_bytes(image: &RgbImage) -> Result<Vec<u8>, PerceptionError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| PerceptionError::Image {
            path: "<in-memory png>".into(),
            source,
        })?;
    Ok(buf.into_inner())
}

fn http_err(url: &str, detail: impl ToString) -> PerceptionError {
    PerceptionError::Http {
        url: url.to_string(),
        detail: detail.to_string(),
    }
}

fn post_multipart(
    client: &reqwest::blocking::Client,
    url: &str,
    image: &RgbImage,
    params: serde_json::Value,
) -> Result<reqwest::blocking::Response, PerceptionError> {
    let part = reqwest::blocking::multipart::Part::bytes(png_bytes(image)?)
        .file_name("frame.png")
        .mime_str("image/png")
        .map_err(|e| http_err(url, e))?;
    let form = reqwest::blocking::multipart::Form::new()
        .part("image", part)
        .text("params", params.to_string());
    let resp = client
        .post(url)
        .multipart(form)
        .send()
        .map_err(|e| http_err(url, e))?;
    if !resp.status().is_success() {
        return Err(http_err(url, format!("status {}", resp.status())));
    }
    Ok(resp)
}

fn make_client(timeout: Duration) -> Result<reqwest::blocking::Client, PerceptionError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| http_err("<client>", e))
}

/// Open-vocabulary detector served over HTTP.
pub struct HttpDetector {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpDetector {
    pub fn new(base_url: &str, timeout: Duration) -> Result<HttpDetector, PerceptionError> {
        Ok(HttpDetector {
            base_url: base_url.trim_end_matches('/').to_string(),
            client: make_client(timeout)?,
        })
    }
}

#[derive(Deserialize)]
struct WireDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

impl Detector for HttpDetector {
    fn detect(&self, frame: &Frame, class: &str) -> Result<Vec<Detection2D>, PerceptionError> {
        let url = format!("{}/detect", self.base_url);
        let resp = post_multipart(
            &self.client,
            &url,
            &frame.color,
            serde_json::json!({ "class": class }),
        )?;
        let wire: Vec<WireDetection> = resp.json().map_err(|e| http_err(&url, e))?;
        Ok(wire
            .into_iter()
            .map(|w| Detection2D {
                frame_id: frame.frame_id.clone(),
                label: w.label,
                bbox: BBox2::from(w.bbox),
                score: w.score,
            })
            .collect())
    }
}

/// Box-prompted segmenter served over HTTP.
pub struct HttpSegmenter {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpSegmenter {
    pub fn new(base_url: &str, timeout: Duration) -> Result<HttpSegmenter, PerceptionError> {
        Ok(HttpSegmenter {
            base_url: base_url.trim_end_matches('/').to_string(),
            client: make_client(timeout)?,
        })
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, frame: &Frame, bbox: &BBox2) -> Result<Mask2D, PerceptionError> {
        let url = format!("{}/segment", self.base_url);
        let resp = post_multipart(
            &self.client,
            &url,
            &frame.color,
            serde_json::json!({ "box": [bbox.x0, bbox.y0, bbox.x1, bbox.y1] }),
        )?;
        let bytes = resp.bytes().map_err(|e| http_err(&url, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| http_err(&url, format!("bad mask png: {e}")))?
            .into_luma8();
        Ok(Mask2D::from_gray(frame.frame_id.clone(), &img))
    }
}
