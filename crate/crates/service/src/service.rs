//! Screening service: registration, proposals, decisions and statistics
//! over one event log.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use drscreen::analytics::{
    annual_summaries, annual_summary, global_agreement, gp_table, workload_from_events, AnalyticsError, AnnualSummary,
    GpRow, Period, ScreeningEvent, SecondLevel, WorkloadCounterfactual,
};
use drscreen::enhancement::{enhance_with, EnhanceParams, FundusGeometry};
use drscreen::metrics::AgreementStats;
use drscreen::orchestrator::screen_full_study;
use drscreen::{Execution, EyeStudy, FundusImage, InferenceBackend, Laterality, OrchestratorConfig, StudyProposal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ServiceConfig};
use crate::sidecar::{SidecarError, StudyBundle};
use crate::state::{SortMode, State, StateError, Status, WorklistEntry};
use crate::store::{
    BlobStore, DecisionRecorded, EventBody, EventLog, EyeRef, ImageRef, ProposalComputed, StoreError, StoreEvent,
    StudyRegistered,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("study {0} not found")]
    NotFound(String),
    #[error("image {image_id} not found in study {study_id}")]
    ImageNotFound { study_id: String, image_id: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("study {0} has no proposal yet")]
    ProposalMissing(String),
    #[error("proposal for study {0} is being computed")]
    Pending(String),
    #[error("screening backend unavailable: {0}")]
    Unavailable(String),
    #[error("screening failed: {0}")]
    Screening(String),
    #[error("{0}")]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("event log inconsistent: {0}")]
    State(#[from] StateError),
}

impl From<SidecarError> for ServiceError {
    fn from(e: SidecarError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

impl ServiceError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ServiceError::Unavailable(_) | ServiceError::Pending(_))
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOutcome {
    pub study_id: String,
    /// False when an identical bundle was already registered.
    pub created: bool,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    /// Defaults to the GP named at registration.
    #[serde(default)]
    pub gp_id: Option<String>,
    pub refer: bool,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub second_level: Option<SecondLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    None,
    Computing,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub image_id: String,
    pub acquisition_index: u32,
    pub source_tag: Option<String>,
    pub width: u32,
    pub height: u32,
    /// Fundus circle and crop box of the enhanced variant, in source pixels.
    pub enhanced_geometry: Option<FundusGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeView {
    pub eye_id: String,
    pub laterality: Laterality,
    pub images: Vec<ImageView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyView {
    pub study_id: String,
    pub received_at: DateTime<Utc>,
    pub gp_id: Option<String>,
    pub pressure_referral: bool,
    pub status: Status,
    pub proposal_state: ProposalState,
    pub eyes: Vec<EyeView>,
    pub proposal: Option<StudyProposal>,
    pub decision: Option<DecisionRecorded>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageVariant {
    Original,
    Enhanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpTableReport {
    pub period: Period,
    pub rows: Vec<GpRow>,
    pub global: Option<AgreementStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backend: String,
    pub studies: usize,
    pub last_sequence: u64,
}

struct Inner {
    state: State,
    log: EventLog,
}

pub struct Service {
    backend: Arc<dyn InferenceBackend>,
    backend_name: String,
    orchestrator: OrchestratorConfig,
    enhance: EnhanceParams,
    timeout: std::time::Duration,
    blobs: BlobStore,
    inner: RwLock<Inner>,
    in_flight: Mutex<HashSet<String>>,
    clock: Clock,
}

/// Marks a study's proposal as in flight until dropped.
pub struct ComputeGuard {
    service: Arc<Service>,
    study_id: String,
}

impl Drop for ComputeGuard {
    fn drop(&mut self) {
        self.service.in_flight.lock().expect("in-flight lock").remove(&self.study_id);
    }
}

impl Service {
    /// Opens the log at `config.store_path`, replays it and builds the backend.
    pub fn open(config: &ServiceConfig) -> Result<Service, ServiceError> {
        config.validate()?;
        let spec = config.backend_spec()?;
        let backend = spec
            .build(config.seed, config.inference_timeout())
            .map_err(|e| ServiceError::Config(ConfigError::Invalid(e.to_string())))?;
        Self::with_backend(config, backend, spec.to_string())
    }

    pub fn with_backend(
        config: &ServiceConfig,
        backend: Arc<dyn InferenceBackend>,
        backend_name: String,
    ) -> Result<Service, ServiceError> {
        config.validate()?;
        let (log, events) = EventLog::open(&config.store_path)?;
        let state = State::replay(&events)?;
        tracing::info!(events = events.len(), studies = state.len(), "event log replayed");
        Ok(Service {
            backend,
            backend_name,
            orchestrator: config.orchestrator(Execution::default()),
            enhance: config.enhance_params(),
            timeout: config.inference_timeout(),
            blobs: BlobStore::beside(&config.store_path)?,
            inner: RwLock::new(Inner { state, log }),
            in_flight: Mutex::new(HashSet::new()),
            clock: Arc::new(Utc::now),
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn inference_timeout(&self) -> std::time::Duration {
        self.timeout
    }

    pub fn orchestrator_config(&self) -> &OrchestratorConfig {
        &self.orchestrator
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("state lock poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().expect("state lock poisoned")
    }

    fn append(inner: &mut Inner, body: EventBody) -> Result<StoreEvent, ServiceError> {
        let event = inner.log.append(body)?;
        inner.state.apply(&event)?;
        Ok(event)
    }

    /// Copy of the derived state.
    pub fn snapshot(&self) -> State {
        self.read().state.clone()
    }

    pub fn register(&self, bundle: &StudyBundle) -> Result<RegisterOutcome, ServiceError> {
        let eyes = bundle.load()?;
        let sidecar = &bundle.sidecar;
        let mut eye_refs = Vec::with_capacity(eyes.len());
        for eye in &eyes {
            let mut images = Vec::with_capacity(eye.images.len());
            for img in &eye.images {
                images.push(ImageRef {
                    image_id: img.image_id.clone(),
                    acquisition_index: img.acquisition_index,
                    source_tag: img.source_tag.clone(),
                    width: img.width(),
                    height: img.height(),
                    blob: self.blobs.put_png(img.rgb())?,
                });
            }
            eye_refs.push(EyeRef { eye_id: eye.eye_id.clone(), laterality: eye.laterality, images });
        }
        let content_hash = content_hash(&sidecar.study_id, &sidecar.gp_id, sidecar.pressure_referral, &eye_refs);

        let mut inner = self.write();
        if let Some(existing) = inner.state.get(&sidecar.study_id) {
            if existing.registration.content_hash == content_hash {
                return Ok(RegisterOutcome {
                    study_id: sidecar.study_id.clone(),
                    created: false,
                    status: existing.status(),
                });
            }
            return Err(ServiceError::Conflict(format!(
                "study {} already registered with different content",
                sidecar.study_id
            )));
        }
        let registration = StudyRegistered {
            study_id: sidecar.study_id.clone(),
            received_at: sidecar.received_at.unwrap_or_else(|| (self.clock)()),
            content_hash,
            gp_id: sidecar.gp_id.clone(),
            pressure_referral: sidecar.pressure_referral,
            eyes: eye_refs,
        };
        Self::append(&mut inner, EventBody::StudyRegistered(registration))?;
        Ok(RegisterOutcome { study_id: sidecar.study_id.clone(), created: true, status: Status::Pending })
    }

    /// Stored proposal, if any. Errors when the study is unknown.
    pub fn proposal(&self, study_id: &str) -> Result<Option<StudyProposal>, ServiceError> {
        let inner = self.read();
        let rec = inner.state.get(study_id).ok_or_else(|| ServiceError::NotFound(study_id.into()))?;
        Ok(rec.proposal.as_ref().map(|p| p.proposal.clone()))
    }

    /// Claims the right to compute a proposal. `None` when another
    /// computation for the study is already running.
    pub fn begin_compute(self: &Arc<Self>, study_id: &str) -> Option<ComputeGuard> {
        let mut set = self.in_flight.lock().expect("in-flight lock");
        set.insert(study_id.to_string()).then(|| ComputeGuard { service: self.clone(), study_id: study_id.into() })
    }

    pub fn is_computing(&self, study_id: &str) -> bool {
        self.in_flight.lock().expect("in-flight lock").contains(study_id)
    }

    fn load_eyes(&self, reg: &StudyRegistered) -> Result<Vec<EyeStudy>, ServiceError> {
        reg.eyes
            .iter()
            .map(|eye| {
                let images = eye
                    .images
                    .iter()
                    .map(|r| {
                        let mut img = FundusImage::new(
                            r.image_id.clone(),
                            self.blobs.get_image(&r.blob)?,
                            eye.laterality,
                            r.acquisition_index,
                        );
                        img.source_tag = r.source_tag.clone();
                        Ok(img)
                    })
                    .collect::<Result<Vec<_>, ServiceError>>()?;
                Ok(EyeStudy { eye_id: eye.eye_id.clone(), laterality: eye.laterality, images })
            })
            .collect()
    }

    /// Runs the orchestrator and enhancement, then persists the result.
    /// A stored proposal is returned unchanged.
    pub fn compute_proposal(&self, study_id: &str) -> Result<StudyProposal, ServiceError> {
        let registration = {
            let inner = self.read();
            let rec = inner.state.get(study_id).ok_or_else(|| ServiceError::NotFound(study_id.into()))?;
            if let Some(p) = &rec.proposal {
                return Ok(p.proposal.clone());
            }
            rec.registration.clone()
        };
        let eyes = self.load_eyes(&registration)?;
        let proposal = screen_full_study(study_id, &eyes, self.backend.as_ref(), &self.orchestrator).map_err(|e| {
            if e.is_retriable() {
                ServiceError::Unavailable(e.to_string())
            } else {
                ServiceError::Screening(e.to_string())
            }
        })?;
        let mut enhanced = BTreeMap::new();
        let mut geometry = BTreeMap::new();
        for img in eyes.iter().flat_map(|e| &e.images) {
            let out = enhance_with(img.rgb(), &self.enhance, self.orchestrator.execution);
            enhanced.insert(img.image_id.clone(), self.blobs.put_png(&out.image)?);
            geometry.insert(img.image_id.clone(), out.geometry);
        }

        let mut inner = self.write();
        if let Some(p) = inner.state.get(study_id).and_then(|r| r.proposal.as_ref()) {
            return Ok(p.proposal.clone());
        }
        let record = ProposalComputed {
            study_id: study_id.to_string(),
            computed_at: (self.clock)(),
            backend: self.backend_name.clone(),
            proposal: proposal.clone(),
            enhanced,
            geometry,
        };
        Self::append(&mut inner, EventBody::ProposalComputed(record))?;
        Ok(proposal)
    }

    pub fn record_decision(&self, study_id: &str, req: &DecisionRequest) -> Result<DecisionRecorded, ServiceError> {
        let mut inner = self.write();
        let rec = inner.state.get(study_id).ok_or_else(|| ServiceError::NotFound(study_id.into()))?;
        if let Some(d) = &rec.decision {
            return Err(ServiceError::Conflict(format!(
                "study {study_id} already decided by {} (refer={})",
                d.gp_id, d.refer
            )));
        }
        if rec.proposal.is_none() {
            return Err(ServiceError::ProposalMissing(study_id.into()));
        }
        let gp_id = req
            .gp_id
            .clone()
            .or_else(|| rec.registration.gp_id.clone())
            .filter(|g| !g.trim().is_empty())
            .ok_or_else(|| ServiceError::BadRequest("decision needs a gp_id".into()))?;
        let decision = DecisionRecorded {
            study_id: study_id.to_string(),
            decided_at: req.decided_at.unwrap_or_else(|| (self.clock)()),
            gp_id,
            refer: req.refer,
            note: req.note.clone(),
            second_level: req.second_level,
        };
        Self::append(&mut inner, EventBody::DecisionRecorded(decision.clone()))?;
        Ok(decision)
    }

    pub fn study(&self, study_id: &str) -> Result<StudyView, ServiceError> {
        let inner = self.read();
        let rec = inner.state.get(study_id).ok_or_else(|| ServiceError::NotFound(study_id.into()))?;
        let reg = &rec.registration;
        let geometry = rec.proposal.as_ref().map(|p| &p.geometry);
        let proposal_state = match (&rec.proposal, self.is_computing(study_id)) {
            (Some(_), _) => ProposalState::Ready,
            (None, true) => ProposalState::Computing,
            (None, false) => ProposalState::None,
        };
        Ok(StudyView {
            study_id: reg.study_id.clone(),
            received_at: reg.received_at,
            gp_id: reg.gp_id.clone(),
            pressure_referral: reg.pressure_referral,
            status: rec.status(),
            proposal_state,
            eyes: reg
                .eyes
                .iter()
                .map(|e| EyeView {
                    eye_id: e.eye_id.clone(),
                    laterality: e.laterality,
                    images: e
                        .images
                        .iter()
                        .map(|i| ImageView {
                            image_id: i.image_id.clone(),
                            acquisition_index: i.acquisition_index,
                            source_tag: i.source_tag.clone(),
                            width: i.width,
                            height: i.height,
                            enhanced_geometry: geometry.and_then(|g| g.get(&i.image_id)).copied(),
                        })
                        .collect(),
                })
                .collect(),
            proposal: rec.proposal.as_ref().map(|p| p.proposal.clone()),
            decision: rec.decision.clone(),
        })
    }

    /// PNG bytes of one image.
    pub fn image(&self, study_id: &str, image_id: &str, variant: ImageVariant) -> Result<Vec<u8>, ServiceError> {
        let blob = {
            let inner = self.read();
            let rec = inner.state.get(study_id).ok_or_else(|| ServiceError::NotFound(study_id.into()))?;
            let missing = || ServiceError::ImageNotFound { study_id: study_id.into(), image_id: image_id.into() };
            let original = rec
                .registration
                .eyes
                .iter()
                .flat_map(|e| &e.images)
                .find(|i| i.image_id == image_id)
                .ok_or_else(missing)?;
            match variant {
                ImageVariant::Original => original.blob.clone(),
                ImageVariant::Enhanced => {
                    let p = rec.proposal.as_ref().ok_or_else(|| ServiceError::ProposalMissing(study_id.into()))?;
                    p.enhanced.get(image_id).cloned().ok_or_else(missing)?
                }
            }
        };
        Ok(self.blobs.get(&blob)?)
    }

    pub fn worklist(&self, sort: SortMode, status: Option<Status>) -> Vec<WorklistEntry> {
        self.read().state.worklist(sort, status)
    }

    pub fn screening_events(&self) -> Vec<ScreeningEvent> {
        self.read().state.screening_events()
    }

    pub fn annual(&self, year: Option<i32>) -> Result<Vec<AnnualSummary>, ServiceError> {
        let events = self.screening_events();
        match year {
            Some(y) => Ok(vec![annual_summary(&events, y)?]),
            None => Ok(annual_summaries(&events, Execution::default())),
        }
    }

    pub fn gp_table(&self, period: Period) -> Result<GpTableReport, ServiceError> {
        let events = self.screening_events();
        Ok(GpTableReport { period, rows: gp_table(&events, period)?, global: global_agreement(&events, period)? })
    }

    pub fn workload(&self) -> Result<WorkloadCounterfactual, ServiceError> {
        Ok(workload_from_events(&self.screening_events())?)
    }

    pub fn health(&self) -> Health {
        let inner = self.read();
        Health {
            status: "ok".into(),
            backend: self.backend_name.clone(),
            studies: inner.state.len(),
            last_sequence: inner.log.last_sequence(),
        }
    }
}

fn content_hash(study_id: &str, gp_id: &Option<String>, pressure: bool, eyes: &[EyeRef]) -> String {
    #[derive(Serialize)]
    struct Content<'a> {
        study_id: &'a str,
        gp_id: &'a Option<String>,
        pressure_referral: bool,
        eyes: &'a [EyeRef],
    }
    let bytes = serde_json::to_vec(&Content { study_id, gp_id, pressure_referral: pressure, eyes })
        .expect("registration content serializes");
    hex::encode(Sha256::digest(bytes))
}
