use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use echoqa::dataset::{decode_pgm, quantize, save_dataset};
use echoqa::metrics::Origin;
use echoqa::model::{build_model, ModelConfig};
use echoqa::phantom::{generate_dataset, DegradationMix};
use echoqa::rubric::{Attribute, Column, Rubric};
use echoqa_cli::commands::{app_state, ServeArgs};
use echoqa_cli::server::{router, DisparityResponse, RubricResponse, ScoresResponse};
use echoqa_cli::store::{AnnotationRecord, AnnotationStore};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset(dir: &Path, count: usize) {
    let clips = generate_dataset(count, 5, &DegradationMix::uniform(), &Rubric::default()).unwrap();
    save_dataset(&clips, dir, None).unwrap();
}

fn app(dir: &Path, with_model: bool) -> Router {
    let model = with_model.then(|| {
        let path = dir.join("m.ckpt");
        build_model(&ModelConfig::default(), 3).unwrap().save(&path).unwrap();
        path
    });
    let args = ServeArgs {
        data: dir.to_path_buf(),
        model,
        annotations: None,
        port: 0,
    };
    router(Arc::new(app_state(&args, Rubric::default()).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Every criterion of `attribute` at one rubric column.
fn column(attribute: Attribute, col: Column) -> Vec<Value> {
    Rubric::default()
        .column_scores(attribute, col)
        .into_iter()
        .map(|s| json!({"attribute": attribute.key(), "criterion": s.criterion, "value": s.value}))
        .collect()
}

#[tokio::test]
async fn clip_listing_and_not_found() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let app = app(dir.path(), false);

    let (s, v) = call_json(&app, "GET", "/clips", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 5);
    assert_eq!(v[0]["id"], "c001");
    assert_eq!(v[0]["frame_count"], 20);

    let (s, v) = call_json(&app, "GET", "/clips/c002", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["frames"].as_array().unwrap().len(), 20);
    assert_eq!(v["frames"][3], "/clips/c002/frames/3");

    for uri in ["/clips/nope", "/clips/nope/frames/0", "/clips/c001/frames/20", "/clips/c001/frames/x", "/elsewhere"] {
        let (s, v) = call_json(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"], "not_found", "{uri}");
    }
}

#[tokio::test]
async fn frames_are_lossless_png() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let app = app(dir.path(), false);
    let (s, bytes) = call(&app, "GET", "/clips/c003/frames/7", None).await;
    assert_eq!(s, StatusCode::OK);

    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (227, 227));
    assert_eq!(info.color_type, png::ColorType::Grayscale);

    let pgm = std::fs::read(dir.path().join("clips/c003/frame_07.pgm")).unwrap();
    let frame = decode_pgm(&pgm, Origin::Phantom).unwrap();
    let expected: Vec<u8> = frame.pixels().iter().map(|&v| quantize(v)).collect();
    assert_eq!(&buf[..info.buffer_size()], &expected[..]);
    assert_eq!(&pgm[pgm.len() - expected.len()..], &expected[..]);
}

#[tokio::test]
async fn scores_need_a_model() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let (s, v) = call_json(&app(dir.path(), false), "GET", "/clips/c001/scores", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "no_model");
    assert_eq!(v["message"], "no model loaded");

    let app = app(dir.path(), true);
    let (s, v) = call_json(&app, "GET", "/clips/c001/scores", None).await;
    assert_eq!(s, StatusCode::OK);
    let scores: ScoresResponse = serde_json::from_value(v).unwrap();
    for a in Attribute::ALL {
        assert!((0.0..=1.0).contains(&scores.model.get(a).normalized));
    }
    assert!(scores.annotations.is_empty());
    let (_, again) = call_json(&app, "GET", "/clips/c001/scores", None).await;
    assert_eq!(serde_json::from_value::<ScoresResponse>(again).unwrap().model, scores.model);
}

#[tokio::test]
async fn annotation_over_ceiling_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let app = app(dir.path(), false);
    let mut criteria = column(Attribute::OnAxis, Column::Optimum);
    criteria[0]["value"] = json!(7.0);
    criteria.push(json!({"attribute": "OnAxis", "criterion": "Mitral Valve Clarity", "value": 1.0}));
    criteria.push(json!({"attribute": "Clarity", "criterion": "x", "value": 1.0}));
    let body = json!({"annotator": "GT1", "criteria": criteria});
    let (s, v) = call_json(&app, "POST", "/clips/c001/annotations", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "validation");
    let fields: Vec<String> = serde_json::from_value(v["fields"].clone()).unwrap();
    assert!(fields.iter().any(|f| f.contains("Correct Cardiac Apex") && f.contains("[0, 6]")), "{fields:?}");
    assert!(fields.iter().any(|f| f.contains("Mitral Valve Clarity: unknown criterion")), "{fields:?}");
    assert!(fields.iter().any(|f| f.contains("Clarity/x: unknown attribute")), "{fields:?}");

    let incomplete = json!({"annotator": "GT1", "criteria": column(Attribute::OnAxis, Column::Optimum)[..2]});
    let (s, v) = call_json(&app, "POST", "/clips/c001/annotations", Some(incomplete)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["fields"][0].as_str().unwrap().contains("Interatrial Septum Visible: missing"));

    let (s, v) = call_json(&app, "POST", "/clips/c001/annotations", Some(json!({"annotator": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");

    let (s, _) = call_json(&app, "POST", "/clips/zzz/annotations", Some(json!({}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let text = std::fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap();
    assert!(text.is_empty());
}

#[tokio::test]
async fn annotation_round_trip_and_revisions() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let app = app(dir.path(), false);

    let mut criteria = column(Attribute::OnAxis, Column::Optimum);
    criteria.extend(column(Attribute::DepthGain, Column::Poor));
    let body = json!({"annotator": "GT1", "criteria": criteria, "composites": {"OnAxis": 9.0, "DepthGain": 4.0}});
    let (s, v) = call_json(&app, "POST", "/clips/c002/annotations", Some(body.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let first: AnnotationRecord = serde_json::from_value(v).unwrap();
    assert_eq!(first.id, 1);
    assert_eq!(first.revises, None);
    assert_eq!(first.composites[&Attribute::OnAxis], 9.0);
    assert_eq!(first.composites[&Attribute::DepthGain], 4.0);

    let (_, v) = call_json(&app, "GET", "/clips/c002/annotations", None).await;
    assert_eq!(serde_json::from_value::<Vec<AnnotationRecord>>(v).unwrap(), vec![first.clone()]);

    let drift = json!({"annotator": "GT1", "criteria": criteria, "composites": {"OnAxis": 8.5}});
    let (s, v) = call_json(&app, "POST", "/clips/c002/annotations", Some(drift)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["fields"][0].as_str().unwrap().contains("server computed 9"));

    let (s, v) = call_json(&app, "POST", "/clips/c002/annotations", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["id"], 2);
    assert_eq!(v["revises"], 1);

    drop(app);
    let reopened = AnnotationStore::open(dir.path().join("annotations.jsonl"), &Rubric::default()).unwrap();
    assert_eq!(reopened.all().len(), 2);
    assert_eq!(reopened.all()[0], first);
}

#[tokio::test]
async fn identical_annotators_have_zero_disparity() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 10);
    let app = app(dir.path(), false);
    let cols = [Column::Poor, Column::Average, Column::Optimum];
    for i in 1..=10 {
        let mut criteria = Vec::new();
        for a in Attribute::ALL {
            criteria.extend(column(a, cols[(i + a.index()) % 3]));
        }
        for who in ["GT1", "GT2"] {
            let body = json!({"annotator": who, "criteria": criteria});
            let (s, _) = call_json(&app, "POST", &format!("/clips/c{i:03}/annotations"), Some(body)).await;
            assert_eq!(s, StatusCode::CREATED);
        }
    }
    let (s, v) = call_json(&app, "GET", "/disparity?annotators=GT1,GT2", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let d: DisparityResponse = serde_json::from_value(v).unwrap();
    assert_eq!(d.clips, 10);
    assert_eq!(d.overall.count, 40);
    assert_eq!((d.overall.mean, d.overall.std), (0.0, 0.0));

    let (s, _) = call_json(&app, "GET", "/disparity?annotators=GT1", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&app, "GET", "/disparity?annotators=GT1,GT9", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "insufficient_data");
}

#[tokio::test]
async fn disparity_uses_latest_revision() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let app = app(dir.path(), false);
    let post = |who: &'static str, clip: &'static str, col: Column| {
        let app = app.clone();
        async move {
            let body = json!({"annotator": who, "criteria": column(Attribute::OnAxis, col)});
            let (s, _) = call_json(&app, "POST", &format!("/clips/{clip}/annotations"), Some(body)).await;
            assert_eq!(s, StatusCode::CREATED);
        }
    };
    post("GT1", "c001", Column::Optimum).await;
    post("GT1", "c002", Column::Optimum).await;
    post("GT2", "c001", Column::Poor).await;
    post("GT2", "c002", Column::Optimum).await;
    post("GT2", "c001", Column::Average).await;
    let (_, v) = call_json(&app, "GET", "/disparity?annotators=GT1,GT2", None).await;
    let d: DisparityResponse = serde_json::from_value(v).unwrap();
    // |9 - 6.5| / 9 and 0.
    let gap = 2.5 / 9.0;
    assert!((d.overall.mean - gap / 2.0).abs() < 1e-12);
    assert!((d.overall.std - gap / 2f64.sqrt()).abs() < 1e-12);
    assert!(d.per_attribute[&Attribute::OnAxis].is_some());
    assert!(d.per_attribute[&Attribute::DepthGain].is_none());
}

#[tokio::test]
async fn rubric_endpoint_matches_server_rubric() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 5);
    let (s, v) = call_json(&app(dir.path(), false), "GET", "/rubric", None).await;
    assert_eq!(s, StatusCode::OK);
    let r: RubricResponse = serde_json::from_value(v).unwrap();
    let rubric = Rubric::default();
    assert_eq!(r.bands, rubric.bands);
    assert_eq!(r.attributes.len(), 4);
    for a in &r.attributes {
        let table = rubric.criteria(a.attribute);
        assert_eq!(a.criteria.len(), table.len());
        for (c, t) in a.criteria.iter().zip(table) {
            assert_eq!(c.name, t.name);
            assert_eq!(c.ceiling, t.ceiling());
        }
    }
    let on_axis = &r.attributes[0];
    assert_eq!(on_axis.criteria.iter().find(|c| c.name == "Correct Cardiac Apex").unwrap().ceiling, 6.0);
    assert_eq!(on_axis.criteria.iter().find(|c| c.name == "Interatrial Septum Visible").unwrap().ceiling, 1.0);
}

#[test]
fn store_cuts_torn_tail_and_rejects_drift() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let rubric = Rubric::default();
    let store = AnnotationStore::open(&path, &rubric).unwrap();
    let req: echoqa_cli::store::AnnotationRequest = serde_json::from_value(json!({
        "annotator": "GT1",
        "criteria": column(Attribute::Foreshorten, Column::Average),
    }))
    .unwrap();
    store.append(&rubric, "c001", &req).unwrap();
    drop(store);

    let good = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("{good}{{\"id\":2,\"annot")).unwrap();
    let store = AnnotationStore::open(&path, &rubric).unwrap();
    assert_eq!(store.all().len(), 1);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), good);
    let rec = store.append(&rubric, "c001", &req).unwrap();
    assert_eq!((rec.id, rec.revises), (2, Some(1)));
    drop(store);

    let text = std::fs::read_to_string(&path).unwrap();
    let composite = serde_json::to_string(&rec.composites[&Attribute::Foreshorten]).unwrap();
    std::fs::write(&path, text.replace(&format!("\"Foreshorten\":{composite}"), "\"Foreshorten\":8.0")).unwrap();
    let err = AnnotationStore::open(&path, &rubric).err().expect("drift must be detected");
    assert!(err.to_string().contains("disagree"), "{err}");
}
