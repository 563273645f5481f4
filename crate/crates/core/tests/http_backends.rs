use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use diffss_core::condition_gen::{ConditionImage, ConditionKind, ControlCondition, EdgeDetector, HedServiceDetector};
use diffss_core::generation::{generate, GenerationRequest, HttpGenerator};
use diffss_core::imaging::{self, GrayImage, Rgb, RgbImage};
use diffss_core::remote::RemoteConfig;
use diffss_core::Error;
use serde_json::{json, Value};

/// Serves each canned `(status, body)` to one connection, in order, and
/// forwards every request body it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(serde_json::from_slice(&buf).unwrap_or(Value::Null));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn quick(url: &str) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(url);
    cfg.timeout = Duration::from_secs(10);
    cfg.retries = 0;
    cfg.backoff = Duration::from_millis(1);
    cfg
}

fn condition() -> ControlCondition {
    ControlCondition {
        kind: ConditionKind::Hed,
        image: ConditionImage::Gray(GrayImage::from_fn(8, 6, |x, y| ((x + y) * 10) as u8).unwrap()),
        prompt: "a real shot photo of cat".into(),
        source_id: "s1".into(),
    }
}

fn png(w: u32, h: u32, v: u8) -> String {
    imaging::base64_png_rgb(&RgbImage::from_pixel(w, h, Rgb([v, v, v])))
}

#[test]
fn generator_round_trip() {
    let body = json!({ "images": [png(8, 6, 10), png(16, 12, 20)] }).to_string();
    let (url, rx) = serve(vec![(200, body)]);
    let backend = HttpGenerator::new(quick(&url), None);
    let mut req = GenerationRequest::new(condition(), 2, 77);
    req.params.insert("guidance_scale".into(), json!(7.5));
    let out = generate(&req, &backend).unwrap();

    let sent = rx.recv().unwrap();
    assert_eq!(sent["condition_kind"], "hed");
    assert_eq!(sent["count"], 2);
    assert_eq!(sent["seed"], 77);
    assert_eq!(sent["prompt"], "a real shot photo of cat");
    assert_eq!(sent["params"]["guidance_scale"], 7.5);
    let cond_png = imaging::base64_decode(sent["condition_image"].as_str().unwrap()).unwrap();
    assert_eq!(imaging::decode_png_gray(&cond_png).unwrap().dimensions(), (8, 6));

    assert_eq!(out.len(), 2);
    assert_eq!(out[1].image.dimensions(), (8, 6));
    assert_eq!(out[1].image.get_pixel(3, 3).0, [20, 20, 20]);
    assert_eq!(out[0].provenance.index, 1);
    assert_eq!(out[1].provenance.image_id(), "s1@hed#2");
    assert_eq!(out[0].provenance.seed, 77);
}

#[test]
fn short_batch_is_rejected() {
    let body = json!({ "images": [png(8, 6, 1)] }).to_string();
    let (url, _rx) = serve(vec![(200, body)]);
    let err = generate(&GenerationRequest::new(condition(), 3, 0), &HttpGenerator::new(quick(&url), None)).unwrap_err();
    assert!(matches!(err, Error::MalformedResponse { .. }), "{err}");
}

#[test]
fn server_errors_and_garbage() {
    let (url, _rx) = serve(vec![(503, "{\"detail\":\"busy\"}".into()), (200, "not json".into()), (200, json!({"images": ["%%%"]}).to_string())]);
    let backend = HttpGenerator::new(quick(&url), None);
    let req = GenerationRequest::new(condition(), 1, 0);
    assert!(matches!(generate(&req, &backend), Err(Error::BackendUnavailable { .. })));
    assert!(matches!(generate(&req, &backend), Err(Error::MalformedResponse { .. })));
    assert!(matches!(generate(&req, &backend), Err(Error::MalformedResponse { .. })));
}

#[test]
fn unreachable_backend_is_a_backend_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpGenerator::new(quick(&format!("http://127.0.0.1:{port}/")), None);
    let err = generate(&GenerationRequest::new(condition(), 1, 0), &backend).unwrap_err();
    assert!(err.is_backend());
}

#[test]
fn transport_failures_are_retried() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = quick(&format!("http://{addr}/"));
    cfg.retries = 2;
    let backend = HttpGenerator::new(cfg, None);
    let start = std::time::Instant::now();
    assert!(generate(&GenerationRequest::new(condition(), 1, 0), &backend).is_err());
    assert!(start.elapsed() >= Duration::from_millis(3));
}

#[test]
fn count_limit_checked_before_any_request() {
    let backend = HttpGenerator::new(quick("http://127.0.0.1:9/"), Some(2));
    let err = generate(&GenerationRequest::new(condition(), 3, 0), &backend).unwrap_err();
    assert!(matches!(err, Error::CountExceedsLimit { requested: 3, limit: 2 }));
}

#[test]
fn hed_service_resizes_to_input() {
    let edge = GrayImage::from_fn(4, 3, |x, _| if x >= 2 { 200 } else { 0 }).unwrap();
    let body = json!({ "edge": imaging::base64_encode(&imaging::encode_png_gray(&edge.to_image())) }).to_string();
    let (url, rx) = serve(vec![(200, body)]);
    let det = HedServiceDetector::new(quick(&url));
    let img = RgbImage::from_pixel(8, 6, Rgb([9, 9, 9]));
    let out = det.detect(&img).unwrap();
    assert_eq!(out.dimensions(), (8, 6));
    assert_eq!(out.get(0, 0), 0);
    assert_eq!(out.get(7, 5), 200);
    assert!(rx.recv().unwrap()["image"].is_string());
}
