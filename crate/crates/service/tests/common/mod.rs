#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use chrono::{DateTime, Utc};
use drscreen::backend::{BackendError, HeuristicStubModel};
use drscreen::synth::{render, DiscPlacement, FundusSpec};
use drscreen::{FieldScores, FundusImage, InferenceBackend, Laterality};
use drscreen_service::service::Clock;
use drscreen_service::sidecar::{Sidecar, SidecarEye, SidecarImage, StudyBundle};
use drscreen_service::{Service, ServiceConfig};

pub fn png(spec: &FundusSpec) -> Vec<u8> {
    drscreen_service::store::encode_png(&render(spec)).unwrap()
}

pub fn at(secs: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(1_704_103_200 + secs, 0).unwrap()
}

/// Two-eye bundle; `lesions` go on the left eye.
pub fn bundle(id: &str, lesions: usize, received: i64) -> StudyBundle {
    let engine = base64::engine::general_purpose::STANDARD;
    let mut images = BTreeMap::new();
    let mut eyes = Vec::new();
    for (e, lat) in [Laterality::Left, Laterality::Right].into_iter().enumerate() {
        let mut list = Vec::new();
        for (k, disc) in [DiscPlacement::Lateral, DiscPlacement::Centered].into_iter().enumerate() {
            let file = format!("{id}-{lat}{k}.png");
            let spec = FundusSpec {
                size: 160,
                disc,
                lesions: if e == 0 { lesions } else { 0 },
                seed: (e * 2 + k) as u64 + id.len() as u64,
                ..Default::default()
            };
            images.insert(file.clone(), engine.encode(png(&spec)));
            list.push(SidecarImage { file, acquisition_index: k as u32, image_id: None, source_tag: None });
        }
        eyes.push(SidecarEye { eye_id: None, laterality: lat, images: list });
    }
    StudyBundle {
        sidecar: Sidecar {
            study_id: id.into(),
            received_at: Some(at(received)),
            gp_id: Some("gp1".into()),
            pressure_referral: false,
            eyes,
        },
        images,
    }
}

/// Heuristic stub that can be switched off or slowed down.
#[derive(Default)]
pub struct Switchable {
    inner: HeuristicStubModel,
    pub down: AtomicBool,
    pub delay_ms: AtomicU64,
}

impl Switchable {
    fn gate(&self) -> Result<(), BackendError> {
        let d = self.delay_ms.load(Ordering::SeqCst);
        if d > 0 {
            std::thread::sleep(Duration::from_millis(d));
        }
        if self.down.load(Ordering::SeqCst) {
            return Err(BackendError::Unavailable("switched off".into()));
        }
        Ok(())
    }
}

impl InferenceBackend for Switchable {
    fn name(&self) -> &str {
        "heuristic"
    }
    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError> {
        self.gate()?;
        self.inner.classify_field(image)
    }
    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError> {
        self.gate()?;
        self.inner.score_dr(image)
    }
    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError> {
        self.gate()?;
        self.inner.score_gradability(image)
    }
}

pub fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig { store_path: dir.join("events.jsonl"), ..Default::default() }
}

pub fn fixed_clock() -> Clock {
    Arc::new(|| at(1_000_000))
}

pub fn open_with(config: &ServiceConfig, backend: Arc<Switchable>) -> Arc<Service> {
    Arc::new(Service::with_backend(config, backend, "heuristic".into()).unwrap().with_clock(fixed_clock()))
}

pub fn open(config: &ServiceConfig) -> Arc<Service> {
    open_with(config, Arc::new(Switchable::default()))
}

/// Serves on an ephemeral port from a dedicated runtime thread.
pub fn spawn(service: Arc<Service>) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, drscreen_service::api::router(service)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
