use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use metonymy_annotate::{router, AppState};
use metonymy_core::annotation::{import_jsonl, AnnotationStore, ImageInfo};
use metonymy_core::catalog::{Lemma, Supersense};
use metonymy_core::pipeline::Style;

fn info(id: &str, concept: &str, style: Style, sense: Supersense) -> ImageInfo {
    ImageInfo {
        image_id: id.into(),
        concept: Lemma::new(concept).unwrap(),
        style,
        supersense: Some(sense),
        pipeline: "semiotic".into(),
    }
}

fn images() -> Vec<ImageInfo> {
    vec![
        info("aa01", "freedom", Style::Naturalistic, Supersense::State),
        info("aa02", "freedom", Style::Stylistic, Supersense::State),
        info("bb01", "grief", Style::Naturalistic, Supersense::Feeling),
    ]
}

fn png_map() -> BTreeMap<String, Vec<u8>> {
    // aa02 deliberately has no file.
    [("aa01".to_string(), b"\x89PNG fake".to_vec()), ("bb01".to_string(), b"\x89PNG other".to_vec())]
        .into_iter()
        .collect()
}

fn app_with(store: AnnotationStore, tokens: Option<HashMap<String, String>>) -> Router {
    let mut st = AppState::new(store, png_map(), "Label each image.\n");
    if let Some(t) = tokens {
        st = st.with_tokens(t);
    }
    router(Arc::new(st), &[])
}

fn app() -> Router {
    app_with(AnnotationStore::in_memory(images()), None)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ct = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ct)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn post_label(body: &str) -> Request<Body> {
    Request::post("/labels")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn label(app: &Router, image: &str, who: &str, label: &str) -> (StatusCode, Value) {
    let body = json!({"image_id": image, "annotator": who, "label": label}).to_string();
    let (s, b, _) = send(app, post_label(&body)).await;
    (s, serde_json::from_slice(&b).unwrap())
}

#[tokio::test]
async fn next_task_walks_every_image_then_reports_done() {
    let app = app();
    let mut seen = Vec::new();
    loop {
        let (s, v) = get_json(&app, "/tasks/next?annotator=ann1").await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" {
            break;
        }
        let id = v["task"]["image_id"].as_str().unwrap().to_string();
        assert_eq!(v["task"]["image_url"], format!("/images/{id}"));
        assert_eq!(label(&app, &id, "ann1", "metonymic").await.0, StatusCode::OK);
        seen.push(id);
    }
    assert_eq!(seen, ["aa01", "aa02", "bb01"]);
}

#[tokio::test]
async fn next_task_prefers_images_still_needing_labels() {
    let app = app();
    label(&app, "aa01", "ann1", "metonymic").await;
    let (_, v) = get_json(&app, "/tasks/next?annotator=ann2").await;
    // aa02 and bb01 have zero labels; aa01 already has one.
    assert_eq!(v["task"]["image_id"], "aa02");
    assert_eq!(v["task"]["remaining"], 3);
}

#[tokio::test]
async fn next_task_filters() {
    let app = app();
    let (_, v) = get_json(&app, "/tasks/next?annotator=a&style=stylistic").await;
    assert_eq!(v["task"]["image_id"], "aa02");
    let (_, v) = get_json(&app, "/tasks/next?annotator=a&supersense=feeling").await;
    assert_eq!(v["task"]["image_id"], "bb01");
    let (_, v) = get_json(&app, "/tasks/next?annotator=a&supersense=time").await;
    assert_eq!(v["status"], "done");
    let (s, _) = get_json(&app, "/tasks/next?annotator=a&style=cubist").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&app, "/tasks/next").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn malformed_labels_are_400_and_unknown_images_404() {
    let app = app();
    for body in [
        "not json",
        r#"{"image_id":"aa01","annotator":"a"}"#,
        r#"{"image_id":"aa01","annotator":"a","label":"maybe"}"#,
        r#"{"image_id":"aa01","annotator":"a","label":"metonymic","flags":["gore"]}"#,
        r#"{"image_id":"aa01","annotator":"a","label":"metonymic","extra":1}"#,
        r#"{"image_id":"aa01","label":"metonymic"}"#,
    ] {
        let (s, _, _) = send(&app, post_label(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
    }
    let (s, v) = {
        let (s, b, _) = send(&app, post_label(r#"{"image_id":" ","annotator":"a","label":"metonymic"}"#)).await;
        (s, serde_json::from_slice::<Value>(&b).unwrap())
    };
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "image_id");

    let (s, v) = label(&app, "zz99", "a", "metonymic").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("zz99"));

    // Nothing above was recorded.
    let (_, body, _) = send(&app, Request::get("/export").body(Body::empty()).unwrap()).await;
    assert!(body.is_empty());
}

#[tokio::test]
async fn resubmission_replaces_and_flags_exclude() {
    let app = app();
    let (_, v) = label(&app, "aa01", "a", "metonymic").await;
    assert_eq!(v["replaced"], false);
    let body = json!({"image_id": "aa01", "annotator": "a", "label": "non_metonymic", "flags": ["graphic"]});
    let (s, b, _) = send(&app, post_label(&body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["replaced"], true);
    assert_eq!(v["excluded"], true);

    let (_, body, ct) = send(&app, Request::get("/export").body(Body::empty()).unwrap()).await;
    assert_eq!(ct.as_deref(), Some("application/x-ndjson"));
    let recs = import_jsonl(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].label, metonymy_core::annotation::Label::NonMetonymic);
}

#[tokio::test]
async fn agreement_and_rates() {
    let app = app();
    let (_, v) = get_json(&app, "/stats/agreement").await;
    assert_eq!(v["doubly_labeled"], 0);
    assert_eq!(v["agreement"], Value::Null);

    for (img, l1, l2) in [
        ("aa01", "metonymic", "metonymic"),
        ("aa02", "metonymic", "non_metonymic"),
        ("bb01", "non_metonymic", "non_metonymic"),
    ] {
        label(&app, img, "a", l1).await;
        label(&app, img, "b", l2).await;
    }
    let (_, v) = get_json(&app, "/stats/agreement").await;
    assert_eq!(v["matching"], 2);
    assert_eq!(v["doubly_labeled"], 3);

    let (s, v) = get_json(&app, "/stats/metonymic-rate").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["rates"]["overall"]["images"], 3);
    assert_eq!(v["rates"]["overall"]["metonymic"], 1);

    let (_, v) = get_json(&app, "/stats/metonymic-rate?group=by_supersense").await;
    assert_eq!(v["rates"]["state"]["images"], 2);
    assert_eq!(v["rates"]["state"]["rate"], 0.5);
    assert_eq!(v["rates"]["feeling"]["rate"], 0.0);

    let (_, v) = get_json(&app, "/stats/metonymic-rate?group=by_pipeline").await;
    assert_eq!(v["rates"]["semiotic"]["images"], 3);

    let (s, _) = get_json(&app, "/stats/metonymic-rate?group=by_color").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_and_guidelines() {
    let app = app();
    let (s, b, ct) = send(&app, Request::get("/images/aa01").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    assert_eq!(b, b"\x89PNG fake");
    for uri in ["/images/aa02", "/images/nope", "/images/..%2F..%2Fetc%2Fpasswd"] {
        let (s, _, _) = send(&app, Request::get(uri).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
    let (s, b, ct) = send(&app, Request::get("/guidelines").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(ct.unwrap().starts_with("text/plain"));
    assert_eq!(b, b"Label each image.\n");
}

#[tokio::test]
async fn bearer_tokens_bind_annotators() {
    let tokens: HashMap<String, String> = [("t1".into(), "ann1".into()), ("t2".into(), "ann2".into())].into();
    let app = app_with(AnnotationStore::in_memory(images()), Some(tokens));

    let (s, _) = get_json(&app, "/tasks/next?annotator=ann1").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = |uri: &str, tok: &str| {
        Request::get(uri)
            .header(header::AUTHORIZATION, format!("Bearer {tok}"))
            .body(Body::empty())
            .unwrap()
    };
    assert_eq!(send(&app, req("/guidelines", "bogus")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(send(&app, req("/guidelines", "t1")).await.0, StatusCode::OK);
    // Token decides who you are; claiming someone else is refused.
    assert_eq!(send(&app, req("/tasks/next", "t1")).await.0, StatusCode::OK);
    assert_eq!(send(&app, req("/tasks/next?annotator=ann2", "t1")).await.0, StatusCode::FORBIDDEN);

    let post = |body: Value, tok: &str| {
        Request::post("/labels")
            .header(header::CONTENT_TYPE, "application/json")
            .header(header::AUTHORIZATION, format!("Bearer {tok}"))
            .body(Body::from(body.to_string()))
            .unwrap()
    };
    let (s, b, _) = send(&app, post(json!({"image_id": "aa01", "label": "metonymic"}), "t2")).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["annotator"], "ann2");
    let (s, _, _) = send(&app, post(json!({"image_id": "aa01", "annotator": "ann1", "label": "metonymic"}), "t2")).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let app = app();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/labels")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn labels_persist_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotations.jsonl");
    {
        let app = app_with(AnnotationStore::open(images(), &path).unwrap(), None);
        label(&app, "aa01", "a", "metonymic").await;
        label(&app, "aa01", "b", "non_metonymic").await;
    }
    let app = app_with(AnnotationStore::open(images(), &path).unwrap(), None);
    let (_, v) = get_json(&app, "/stats/agreement").await;
    assert_eq!(v["doubly_labeled"], 1);
    assert_eq!(v["matching"], 0);
    let (_, v) = get_json(&app, "/tasks/next?annotator=a").await;
    assert_eq!(v["task"]["image_id"], "aa02");
}
