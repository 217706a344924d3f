//! HTTP service over one immutable model bundle.
//!
//! Every request is validated in full before any model runs, so malformed
//! requests never cost an inference and never change the call counters that
//! `/health` reports.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use frace_core::bundle::ModelBundle;
use frace_core::datasets::{normalize_byte, Dataset, ImageShape};
use frace_core::explainer::{explain_pixels, png_bytes, render_overlay, to_rgb, OverlaySpec};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// Largest `n` accepted by `/samples`.
pub const MAX_SAMPLES: usize = 64;

pub struct AppState {
    pub bundle: ModelBundle<f32>,
    /// Images addressable by `sample_id`; may be empty.
    pub samples: Option<Dataset<f32>>,
    pub overlay: OverlaySpec,
    in_flight: Semaphore,
}

impl AppState {
    pub fn new(
        bundle: ModelBundle<f32>,
        samples: Option<Dataset<f32>>,
        max_in_flight: usize,
    ) -> anyhow::Result<Self> {
        if let Some(s) = &samples {
            let d = &bundle.manifest.dataset;
            if s.descriptor.num_classes != d.num_classes
                || s.descriptor.image_shape != d.image_shape
            {
                anyhow::bail!(
                    "sample set '{}' does not match bundle dataset '{}'",
                    s.descriptor.name,
                    d.name
                );
            }
        }
        Ok(Self {
            bundle,
            samples,
            overlay: OverlaySpec::default(),
            in_flight: Semaphore::new(max_in_flight.max(1)),
        })
    }

    /// Generator plus classifier forward passes run so far.
    pub fn inference_calls(&self) -> u64 {
        self.bundle.generator.forward_calls() + self.bundle.classifier.forward_calls()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    #[serde(default)]
    pub sample_id: Option<usize>,
    /// Base64 PNG (or any decodable image); a `data:` URL prefix is accepted.
    #[serde(default)]
    pub image_payload: Option<String>,
    pub counter_class: i64,
    #[serde(default)]
    pub overlay_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub predicted_class: usize,
    pub counter_class: usize,
    /// Classifier's prediction on the counterfactual image.
    pub counterfactual_class: usize,
    pub prob_counter_before: f64,
    pub prob_counter_after: f64,
    pub overlay_png: String,
    pub counterfactual_png: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub thumbnail_png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub dataset: String,
    pub num_classes: usize,
    pub samples: usize,
    pub inference_calls: u64,
}

#[derive(Debug, Deserialize)]
pub struct SamplesQuery {
    class: Option<usize>,
    n: Option<usize>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/classes", get(classes))
        .route("/samples", get(samples))
        .route("/explain", post(explain))
        .route("/health", get(health))
        .with_state(state)
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<ClassesResponse> {
    Json(ClassesResponse {
        classes: state.bundle.class_names().to_vec(),
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        dataset: state.bundle.manifest.dataset.name.clone(),
        num_classes: state.bundle.num_classes(),
        samples: state.samples.as_ref().map_or(0, |s| s.len()),
        inference_calls: state.inference_calls(),
    })
}

fn encode_png(img: &image::RgbImage) -> Result<String, ApiError> {
    png_bytes(img)
        .map(|b| BASE64.encode(b))
        .map_err(|e| ApiError::internal(format!("png encoding failed: {e}")))
}

async fn samples(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SamplesQuery>,
) -> Result<Json<Vec<Sample>>, ApiError> {
    let c = state.bundle.num_classes();
    let n = q.n.unwrap_or(8);
    if n > MAX_SAMPLES {
        return Err(ApiError::bad_request(format!(
            "n = {n} exceeds the limit of {MAX_SAMPLES}"
        )));
    }
    if let Some(k) = q.class.filter(|&k| k >= c) {
        return Err(ApiError::bad_request(format!("class {k} outside [0, {c})")));
    }
    let Some(data) = &state.samples else {
        return Ok(Json(Vec::new()));
    };
    let ids: Vec<usize> = match q.class {
        Some(k) => data.indices_of_class(k, n),
        None => (0..data.len().min(n)).collect(),
    };
    let shape = data.descriptor.image_shape;
    ids.into_iter()
        .map(|id| {
            let e = &data.examples()[id];
            Ok(Sample {
                id,
                label: e.label.index(),
                thumbnail_png: encode_png(&to_rgb(&e.pixels, shape))?,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Json)
}

/// Decodes an uploaded image and resamples it to the bundle's input shape.
pub fn decode_upload(payload: &str, shape: ImageShape) -> Result<Vec<f32>, String> {
    let b64 = match payload.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => payload,
    };
    let bytes = BASE64
        .decode(b64.trim())
        .map_err(|e| format!("image_payload is not valid base64: {e}"))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| format!("image_payload is not a decodable image: {e}"))?;
    let img = img.resize_exact(
        shape.width as u32,
        shape.height as u32,
        FilterType::Triangle,
    );
    let plane = shape.height * shape.width;
    let pixels: Vec<f32> = match shape.channels {
        1 => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(normalize_byte)
            .collect(),
        3 => {
            // Interleaved RGB to channel-major.
            let raw = img.to_rgb8().into_raw();
            (0..3)
                .flat_map(|c| (0..plane).map(move |p| (c, p)))
                .map(|(c, p)| normalize_byte(raw[p * 3 + c]))
                .collect()
        }
        n => return Err(format!("uploads are not supported for {n}-channel models")),
    };
    Ok(pixels)
}

/// Everything `/explain` needs once validation has passed.
struct ValidRequest {
    pixels: Vec<f32>,
    counter_class: usize,
    overlay: OverlaySpec,
}

fn validate(state: &AppState, body: &[u8]) -> Result<ValidRequest, ApiError> {
    let req: ExplainRequest = serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))?;
    let c = state.bundle.num_classes();
    if req.counter_class < 0 || req.counter_class as usize >= c {
        return Err(ApiError::bad_request(format!(
            "counter_class {} outside [0, {c})",
            req.counter_class
        )));
    }
    let overlay = match req.overlay_threshold {
        Some(t) => state.overlay.clone().with_threshold(t),
        None => state.overlay.clone(),
    };
    overlay
        .validate()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let shape = state.bundle.manifest.dataset.image_shape;
    let pixels = match (req.sample_id, req.image_payload) {
        (Some(id), None) => {
            let data = state.samples.as_ref().ok_or_else(|| {
                ApiError::bad_request("this service has no sample set; send image_payload")
            })?;
            let e = data.get(id).ok_or_else(|| {
                ApiError::bad_request(format!("sample_id {id} outside [0, {})", data.len()))
            })?;
            e.pixels.clone()
        }
        (None, Some(payload)) => decode_upload(&payload, shape).map_err(ApiError::bad_request)?,
        _ => {
            return Err(ApiError::bad_request(
                "exactly one of sample_id and image_payload is required",
            ))
        }
    };
    Ok(ValidRequest {
        pixels,
        counter_class: req.counter_class as usize,
        overlay,
    })
}

fn run_explain(state: &AppState, req: ValidRequest) -> Result<ExplainResponse, ApiError> {
    let b = &state.bundle;
    let e = explain_pixels(&b.generator, &b.classifier, &req.pixels, req.counter_class)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(ExplainResponse {
        predicted_class: e.predicted_class.index(),
        counter_class: e.counter_class.index(),
        counterfactual_class: frace_core::tensor::argmax(&e.probs_after),
        prob_counter_before: e.prob_counter_before() as f64,
        prob_counter_after: e.prob_counter_after() as f64,
        overlay_png: encode_png(&render_overlay(&e, &req.overlay))?,
        counterfactual_png: encode_png(&to_rgb(&e.counterfactual_image, e.shape))?,
        latency_ms: e.latency_ms,
    })
}

async fn explain(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<ExplainResponse>, ApiError> {
    let req = validate(&state, &body)?;
    let _permit = state.in_flight.try_acquire().map_err(|_| ApiError {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: "too many explanations in flight; retry shortly".into(),
    })?;
    let worker = Arc::clone(&state);
    tokio::task::spawn_blocking(move || run_explain(&worker, req))
        .await
        .map_err(|e| ApiError::internal(format!("explain task failed: {e}")))?
        .map(Json)
}

/// Serves until interrupted.
pub async fn serve(state: AppState, bind: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!(
        "serving {} ({} classes) on http://{}",
        state.bundle.manifest.dataset.name,
        state.bundle.num_classes(),
        listener.local_addr()?
    );
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
