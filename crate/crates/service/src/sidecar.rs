//! Study sidecar metadata and the image bundle it describes.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use chrono::{DateTime, Utc};
use drscreen::study::validate_study;
use drscreen::{EyeStudy, FundusImage, Laterality};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SidecarError {
    #[error("missing image file {0}")]
    MissingFile(String),
    #[error("cannot decode image {file}: {reason}")]
    Decode { file: String, reason: String },
    #[error("eye {eye_id}: {reason}")]
    InvalidEye { eye_id: String, reason: String },
    #[error("a study needs one or two eyes, got {0}")]
    EyeCount(usize),
    #[error("eye id {0} used more than once")]
    DuplicateEye(String),
    #[error("malformed sidecar: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarImage {
    pub file: String,
    pub acquisition_index: u32,
    /// Defaults to the file name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl SidecarImage {
    pub fn id(&self) -> &str {
        self.image_id.as_deref().unwrap_or(&self.file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEye {
    /// Defaults to `<study_id>-<L|R>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eye_id: Option<String>,
    pub laterality: Laterality,
    pub images: Vec<SidecarImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub study_id: String,
    /// Arrival time; the service clock is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_id: Option<String>,
    #[serde(default)]
    pub pressure_referral: bool,
    pub eyes: Vec<SidecarEye>,
}

impl Sidecar {
    pub fn eye_id(&self, eye: &SidecarEye) -> String {
        eye.eye_id.clone().unwrap_or_else(|| format!("{}-{}", self.study_id, eye.laterality))
    }

    /// Decodes every referenced image and checks the eye invariants.
    pub fn load<F>(&self, mut fetch: F) -> Result<Vec<EyeStudy>, SidecarError>
    where
        F: FnMut(&str) -> Option<Vec<u8>>,
    {
        if self.study_id.trim().is_empty() {
            return Err(SidecarError::Malformed("empty study_id".into()));
        }
        if self.eyes.is_empty() || self.eyes.len() > 2 {
            return Err(SidecarError::EyeCount(self.eyes.len()));
        }
        let mut out = Vec::with_capacity(self.eyes.len());
        for eye in &self.eyes {
            let eye_id = self.eye_id(eye);
            if out.iter().any(|e: &EyeStudy| e.eye_id == eye_id) {
                return Err(SidecarError::DuplicateEye(eye_id));
            }
            let mut images = Vec::with_capacity(eye.images.len());
            for img in &eye.images {
                let bytes = fetch(&img.file).ok_or_else(|| SidecarError::MissingFile(img.file.clone()))?;
                let rgb = image::load_from_memory(&bytes)
                    .map_err(|e| SidecarError::Decode { file: img.file.clone(), reason: e.to_string() })?
                    .to_rgb8();
                let mut f = FundusImage::new(img.id(), rgb, eye.laterality, img.acquisition_index);
                f.source_tag = img.source_tag.clone();
                images.push(f);
            }
            let study = EyeStudy { eye_id: eye_id.clone(), laterality: eye.laterality, images };
            let violations = validate_study(&study);
            if !violations.is_empty() {
                let reason = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                return Err(SidecarError::InvalidEye { eye_id, reason });
            }
            out.push(study);
        }
        Ok(out)
    }

    /// Loads images named relative to `dir`.
    pub fn load_from_dir(&self, dir: &Path) -> Result<Vec<EyeStudy>, SidecarError> {
        self.load(|file| {
            let rel = Path::new(file);
            // Sidecars may only reach files under their own directory.
            if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return None;
            }
            std::fs::read(dir.join(rel)).ok()
        })
    }
}

/// Request body of `POST /studies`: the sidecar plus base64 image files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBundle {
    pub sidecar: Sidecar,
    pub images: BTreeMap<String, String>,
}

impl StudyBundle {
    pub fn load(&self) -> Result<Vec<EyeStudy>, SidecarError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut bad: Option<SidecarError> = None;
        let eyes = self.sidecar.load(|file| {
            let b64 = self.images.get(file)?;
            match engine.decode(b64) {
                Ok(b) => Some(b),
                Err(e) => {
                    bad.get_or_insert(SidecarError::Decode { file: file.to_string(), reason: e.to_string() });
                    Some(Vec::new())
                }
            }
        });
        match (bad, eyes) {
            (Some(e), _) => Err(e),
            (None, r) => r,
        }
    }

    /// Bundle from a sidecar file and the images next to it.
    pub fn from_dir(sidecar: Sidecar, dir: &Path) -> std::io::Result<Self> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut images = BTreeMap::new();
        for eye in &sidecar.eyes {
            for img in &eye.images {
                let bytes = std::fs::read(dir.join(&img.file))?;
                images.insert(img.file.clone(), engine.encode(bytes));
            }
        }
        Ok(StudyBundle { sidecar, images })
    }
}
