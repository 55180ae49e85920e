//! Exercises the HTTP transport against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dillema::backend::{
    b64, encode_class_map, encode_png, BackendClient, BackendError, Endpoint, GenerationRequest, HttpTransport,
    Prediction, Role,
};
use dillema::conditioning::{canny, CannyParams, LumaGrid};
use dillema::model::{ClassMap, TaskKind};
use image::{DynamicImage, RgbImage};
use serde_json::{json, Value};

struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

impl Reply {
    fn ok(body: Value) -> Self {
        Self { status: 200, body: body.to_string(), delay: Duration::ZERO }
    }
}

/// Serves `replies` in order, one per connection, and reports each request.
fn serve(replies: Vec<Reply>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            let mut authorization = None;
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let header = line.trim_end();
                if header.is_empty() {
                    break;
                }
                let (name, value) = header.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let _ = tx.send(Seen { path, authorization, body });
            thread::sleep(reply.delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            );
        }
    });
    (url, rx)
}

fn client(role: Role, url: &str, timeout: f64, token: Option<&str>) -> BackendClient {
    let endpoint = Endpoint::new(url, timeout, token.map(str::to_string)).unwrap();
    BackendClient::new(Arc::new(HttpTransport::single(role, endpoint).unwrap()))
}

fn image(w: u32, h: u32) -> DynamicImage {
    DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, _| image::Rgb([(x * 7) as u8, 40, 90])))
}

#[test]
fn server_error_is_a_typed_status() {
    let (url, _rx) = serve(vec![Reply { status: 500, body: "boom".into(), delay: Duration::ZERO }]);
    let err = client(Role::Llm, &url, 5.0, None).complete("prompt", 1, 0.7).unwrap_err();
    match err {
        BackendError::Status { role, status, body } => {
            assert_eq!(role, Role::Llm);
            assert_eq!(status, 500);
            assert_eq!(body, "boom");
        }
        other => panic!("expected Status, got {other:?}"),
    }
}

#[test]
fn slow_server_times_out() {
    let (url, _rx) = serve(vec![Reply { status: 200, body: "{}".into(), delay: Duration::from_secs(3) }]);
    let err = client(Role::Llm, &url, 0.3, None).complete("prompt", 1, 0.7).unwrap_err();
    assert!(matches!(err, BackendError::Timeout { role: Role::Llm, .. }), "{err:?}");
}

#[test]
fn completion_round_trip_sends_bearer_token_and_seed() {
    let (url, rx) = serve(vec![Reply::ok(json!({ "text": "KEYWORDS: [\"red\"]" }))]);
    let text = client(Role::Llm, &url, 5.0, Some("s3cret")).complete("hello", 42, 0.5).unwrap();
    assert_eq!(text, "KEYWORDS: [\"red\"]");
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/complete");
    assert_eq!(seen.authorization.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen.body["seed"], 42);
    assert_eq!(seen.body["prompt"], "hello");
}

#[test]
fn caption_reply_becomes_sentences() {
    let (url, rx) = serve(vec![Reply::ok(json!({ "sentences": ["A red car.", "It rains."] }))]);
    let caption = client(Role::Captioner, &url, 5.0, None).caption_image(&image(8, 8)).unwrap();
    assert_eq!(caption.sentences, vec!["A red car.", "It rains."]);
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/caption");
    assert!(seen.authorization.is_none());
    assert!(seen.body["image_b64"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn generated_image_of_wrong_size_is_rejected() {
    let wrong = b64(&encode_png(&image(16, 8)).unwrap());
    let (url, rx) = serve(vec![Reply::ok(json!({ "image_b64": wrong }))]);
    let edges =
        canny(&LumaGrid::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 1.0 }), &CannyParams::default()).unwrap();
    let request = GenerationRequest { caption: "A car.".into(), conditioning: edges, seed: 9, guidance: Some(7.5) };
    let err = client(Role::Generator, &url, 5.0, None).generate_image(&request).unwrap_err();
    assert_eq!(err, BackendError::DimensionMismatch { width: 16, height: 16, got_width: 16, got_height: 8 });
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/generate");
    assert_eq!(seen.body["seed"], 9);
    assert_eq!(seen.body["guidance"], 7.5);
}

#[test]
fn segmentation_mask_must_match_image_shape() {
    let short = ClassMap::new(31, 32, vec![1; 31 * 32]).unwrap();
    let full = ClassMap::new(32, 32, vec![2; 32 * 32]).unwrap();
    let (url, _rx) = serve(vec![
        Reply::ok(json!({ "mask_b64": b64(&encode_class_map(&short).unwrap()) })),
        Reply::ok(json!({ "mask_b64": b64(&encode_class_map(&full).unwrap()) })),
    ]);
    let c = client(Role::Predictor, &url, 5.0, None);
    let err = c.predict(&image(32, 32), TaskKind::SemanticSegmentation).unwrap_err();
    assert_eq!(err, BackendError::Shape { width: 32, height: 32, got_width: 31, got_height: 32 });
    match c.predict(&image(32, 32), TaskKind::SemanticSegmentation).unwrap() {
        Prediction::Mask(map) => assert_eq!(map, full),
        other => panic!("expected a mask, got {other:?}"),
    }
}

#[test]
fn label_prediction_and_malformed_reply() {
    let (url, _rx) = serve(vec![Reply::ok(json!({ "label": 3 })), Reply::ok(json!({ "label": "cat" }))]);
    let c = client(Role::Predictor, &url, 5.0, None);
    assert_eq!(c.predict(&image(4, 4), TaskKind::Classification).unwrap(), Prediction::Label(3));
    let err = c.predict(&image(4, 4), TaskKind::Classification).unwrap_err();
    assert!(matches!(err, BackendError::Protocol { role: Role::Predictor, .. }), "{err:?}");
}

#[test]
fn unreachable_and_unconfigured_roles() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = client(Role::Llm, &url, 2.0, None).complete("p", 0, 0.0).unwrap_err();
    assert!(matches!(err, BackendError::Transport { role: Role::Llm, .. }), "{err:?}");

    let err = client(Role::Llm, &url, 2.0, None).caption_image(&image(2, 2)).unwrap_err();
    assert!(matches!(&err, BackendError::NotConfigured { var, .. } if var == "DILLEMA_CAPTIONER_URL"), "{err:?}");
}

#[test]
fn endpoint_comes_from_environment() {
    // Only this test touches the predictor variables.
    std::env::remove_var("DILLEMA_PREDICTOR_URL");
    assert!(matches!(Endpoint::from_env(Role::Predictor, 5.0), Err(BackendError::NotConfigured { .. })));
    std::env::set_var("DILLEMA_PREDICTOR_URL", "http://127.0.0.1:9/");
    std::env::set_var("DILLEMA_PREDICTOR_TOKEN", "tok");
    let endpoint = Endpoint::from_env(Role::Predictor, 5.0).unwrap();
    assert_eq!(endpoint.url_for(Role::Predictor), "http://127.0.0.1:9/predict");
    assert_eq!(endpoint.auth_token.as_deref(), Some("tok"));
    assert!(Endpoint::new("ftp://x", 5.0, None).is_err());
    assert!(Endpoint::new("http://x", 0.0, None).is_err());
}
