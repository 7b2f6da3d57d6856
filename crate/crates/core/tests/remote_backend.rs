use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use drscreen::backend::{BackendError, RemoteBackend, RemoteResponse};
use drscreen::{FundusImage, InferenceBackend, Laterality};
use image::RgbImage;

#[derive(Clone, Copy)]
enum Mode {
    Healthy,
    /// Fails the first request of every pair with a 503.
    Flaky,
    Down,
    Malformed,
}

fn spawn_server(mode: Mode) -> (SocketAddr, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = std::sync::mpsc::channel();
    let counter = hits.clone();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route(
                    "/infer",
                    post(move |State(hits): State<Arc<AtomicUsize>>, body: Bytes| async move {
                        let n = hits.fetch_add(1, Ordering::SeqCst);
                        let decoded = image::load_from_memory(&body).is_ok();
                        let ok = RemoteResponse {
                            field_scores: vec![0.7, 0.1, 0.05, 0.05, 0.05, 0.03, 0.02],
                            dr_prob: 0.42,
                            non_gradability_prob: 0.07,
                        };
                        match mode {
                            _ if !decoded => Err(StatusCode::BAD_REQUEST),
                            Mode::Healthy => Ok(Json(ok)),
                            Mode::Flaky if n % 2 == 0 => Err(StatusCode::SERVICE_UNAVAILABLE),
                            Mode::Flaky => Ok(Json(ok)),
                            Mode::Down => Err(StatusCode::SERVICE_UNAVAILABLE),
                            Mode::Malformed => Ok(Json(RemoteResponse { field_scores: vec![1.0], ..ok })),
                        }
                    }),
                )
                .with_state(counter);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), hits)
}

fn image() -> FundusImage {
    FundusImage::new("img", RgbImage::from_pixel(64, 64, image::Rgb([90, 40, 20])), Laterality::Left, 0)
}

fn client(addr: SocketAddr) -> RemoteBackend {
    RemoteBackend::new(format!("http://{addr}/infer"), Duration::from_secs(5)).unwrap()
}

#[test]
fn healthy_server_round_trip() {
    let (addr, hits) = spawn_server(Mode::Healthy);
    let backend = client(addr);
    let raw = backend.raw_scores(&image()).unwrap();
    assert_eq!((raw.dr_prob, raw.non_gradability_prob), (0.42, 0.07));
    assert_eq!(backend.classify_field(&image()).unwrap().0[0], 0.7);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn transient_failure_is_retried_once() {
    let (addr, hits) = spawn_server(Mode::Flaky);
    let raw = client(addr).raw_scores(&image()).unwrap();
    assert_eq!(raw.dr_prob, 0.42);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn persistent_outage_is_retriable_error() {
    let (addr, hits) = spawn_server(Mode::Down);
    let err = client(addr).raw_scores(&image()).unwrap_err();
    assert!(err.is_retriable(), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_response_is_rejected() {
    let (addr, _) = spawn_server(Mode::Malformed);
    let err = client(addr).raw_scores(&image()).unwrap_err();
    assert!(matches!(err, BackendError::InvalidResponse(_)), "{err}");
}

#[test]
fn unreachable_server_is_retriable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = client(addr).raw_scores(&image()).unwrap_err();
    assert!(err.is_retriable());
}
