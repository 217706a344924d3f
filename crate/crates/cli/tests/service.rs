use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use frace_cli::server::{
    router, AppState, ClassesResponse, ExplainResponse, HealthResponse, Sample,
};
use frace_core::bundle::ModelBundle;
use frace_core::cgan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use frace_core::classifier::{Classifier, ResNetConfig};
use frace_core::datasets::{
    Dataset, DatasetDescriptor, DomainLabel, ImageShape, LabeledImage, SplitFractions,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const SHAPE: ImageShape = ImageShape::new(8, 8, 1);
const CLASSES: usize = 10;

fn descriptor() -> DatasetDescriptor {
    DatasetDescriptor {
        name: "toy".into(),
        image_shape: SHAPE,
        num_classes: CLASSES,
        split_fractions: SplitFractions {
            train: 0.5,
            test: 0.5,
        },
        class_names: (0..CLASSES).map(|d| d.to_string()).collect(),
    }
}

fn state() -> Arc<AppState> {
    let h = Classifier::new(ResNetConfig::new(SHAPE, CLASSES).with_width(2), 1).unwrap();
    let mut gc = GeneratorConfig::new(SHAPE, CLASSES).with_width(2);
    gc.residual_blocks = 1;
    let g = Generator::new(gc, 2).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::new(SHAPE, CLASSES).with_width(2), 3).unwrap();
    let bundle = ModelBundle::new(descriptor(), h, g, Some(d)).unwrap();
    let examples = (0..20)
        .map(|i| {
            let pixels = (0..SHAPE.numel())
                .map(|p| ((p * 7 + i * 13) % 17) as f32 / 8.5 - 1.0)
                .collect();
            LabeledImage::new(
                pixels,
                SHAPE,
                DomainLabel::new(i % CLASSES, CLASSES).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let samples = Dataset::new(descriptor(), examples).unwrap();
    Arc::new(AppState::new(bundle, Some(samples), 2).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_explain(app: &Router, body: impl Into<Body>) -> (StatusCode, Value) {
    let req = Request::post("/explain")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap();
    call(app, req).await
}

#[tokio::test]
async fn classes_lists_every_class_name() {
    let app = router(state());
    let (status, body) = get(&app, "/classes").await;
    assert_eq!(status, StatusCode::OK);
    let classes: ClassesResponse = serde_json::from_value(body).unwrap();
    assert_eq!(classes.classes.len(), 10);
    assert_eq!(classes.classes[3], "3");
}

#[tokio::test]
async fn identical_requests_give_byte_identical_overlays() {
    let app = router(state());
    let req = json!({"sample_id": 4, "counter_class": 7}).to_string();
    let (s1, a) = post_explain(&app, req.clone()).await;
    let (s2, b) = post_explain(&app, req).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let a: ExplainResponse = serde_json::from_value(a).unwrap();
    let b: ExplainResponse = serde_json::from_value(b).unwrap();
    assert_eq!(a.overlay_png, b.overlay_png);
    assert_eq!(a.counterfactual_png, b.counterfactual_png);
    assert_eq!(a.counter_class, 7);
    let png = BASE64.decode(&a.overlay_png).unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
}

#[tokio::test]
async fn invalid_counter_class_is_rejected_without_inference() {
    let st = state();
    let app = router(Arc::clone(&st));
    for bad in [99, 10, -1] {
        let (status, body) = post_explain(
            &app,
            json!({"sample_id": 0, "counter_class": bad}).to_string(),
        )
        .await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert!(body["error"].as_str().unwrap().contains("counter_class"));
    }
    assert_eq!(st.inference_calls(), 0);
    let (_, health) = get(&app, "/health").await;
    assert_eq!(health["inference_calls"], 0);
}

#[tokio::test]
async fn malformed_requests_are_rejected_without_inference() {
    let st = state();
    let app = router(Arc::clone(&st));
    let bodies = [
        "not json".to_string(),
        json!({"counter_class": 1}).to_string(),
        json!({"sample_id": 1, "image_payload": "aGk=", "counter_class": 1}).to_string(),
        json!({"sample_id": 500, "counter_class": 1}).to_string(),
        json!({"sample_id": 1, "counter_class": 1, "extra": true}).to_string(),
        json!({"sample_id": 1, "counter_class": 1, "overlay_threshold": -0.5}).to_string(),
        json!({"image_payload": "%%%", "counter_class": 1}).to_string(),
        json!({"image_payload": BASE64.encode(b"not an image"), "counter_class": 1}).to_string(),
    ];
    for body in bodies {
        let (status, value) = post_explain(&app, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}: {value}");
        assert!(value["error"].is_string());
    }
    assert_eq!(st.inference_calls(), 0);
}

#[tokio::test]
async fn uploaded_images_are_resized_and_explained() {
    let st = state();
    let app = router(Arc::clone(&st));
    let img = image::GrayImage::from_fn(28, 28, |x, y| image::Luma([((x + y) * 4) as u8]));
    let mut png = std::io::Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png).unwrap();
    let payload = format!("data:image/png;base64,{}", BASE64.encode(png.into_inner()));
    let (status, body) = post_explain(
        &app,
        json!({"image_payload": payload, "counter_class": 2}).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: ExplainResponse = serde_json::from_value(body).unwrap();
    assert!(r.predicted_class < CLASSES && r.counterfactual_class < CLASSES);
    assert!((0.0..=1.0).contains(&r.prob_counter_before));
    assert!((0.0..=1.0).contains(&r.prob_counter_after));
    // One generator pass and two classifier passes.
    assert_eq!(st.inference_calls(), 3);
}

#[tokio::test]
async fn samples_filter_by_class_and_validate_arguments() {
    let app = router(state());
    let (status, body) = get(&app, "/samples?class=3&n=5").await;
    assert_eq!(status, StatusCode::OK);
    let samples: Vec<Sample> = serde_json::from_value(body).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.label == 3));
    assert_eq!(samples[0].id, 3);

    let (_, body) = get(&app, "/samples").await;
    assert_eq!(body.as_array().unwrap().len(), 8);
    assert_eq!(
        get(&app, "/samples?class=10").await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        get(&app, "/samples?n=1000").await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn health_reports_bundle_and_counters() {
    let st = state();
    let app = router(Arc::clone(&st));
    let (status, body) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    let h: HealthResponse = serde_json::from_value(body).unwrap();
    assert_eq!(
        (h.status.as_str(), h.num_classes, h.samples),
        ("ok", 10, 20)
    );
    post_explain(
        &app,
        json!({"sample_id": 0, "counter_class": 1}).to_string(),
    )
    .await;
    let (_, body) = get(&app, "/health").await;
    assert_eq!(body["inference_calls"], 3);
}
