//! Domain types shared by every stage: images, eyes, studies, proposals and labels.

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Smallest accepted fundus image side, in pixels.
pub const MIN_IMAGE_SIDE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Laterality {
    #[serde(rename = "L", alias = "left")]
    Left,
    #[serde(rename = "R", alias = "right")]
    Right,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        })
    }
}

/// The seven field categories the field classifier distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FieldCategory {
    /// Macula-centred field.
    Central,
    /// Disc-centred field.
    Nasal,
    ODUp,
    ODDown,
    NoOD,
    Temporal,
    Composite,
}

impl FieldCategory {
    pub const ALL: [FieldCategory; 7] = [
        FieldCategory::Central,
        FieldCategory::Nasal,
        FieldCategory::ODUp,
        FieldCategory::ODDown,
        FieldCategory::NoOD,
        FieldCategory::Temporal,
        FieldCategory::Composite,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-image probability vector over [`FieldCategory::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldScores(pub [f64; 7]);

impl FieldScores {
    pub fn get(&self, field: FieldCategory) -> f64 {
        self.0[field.index()]
    }

    /// Normalizes arbitrary logits with a numerically stable softmax.
    pub fn from_logits(logits: [f64; 7]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = logits.map(|l| (l - max).exp());
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= sum);
        FieldScores(out)
    }

    pub fn argmax(&self) -> FieldCategory {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        FieldCategory::ALL[best]
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|p| (0.0..=1.0).contains(p)) && (self.0.iter().sum::<f64>() - 1.0).abs() <= 1e-6
    }
}

/// Screening outcome vocabulary, shared by expert labels and system proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "NR", alias = "NonReferable")]
    NonReferable,
    #[serde(rename = "R_DR", alias = "ReferableDR")]
    ReferableDR,
    #[serde(rename = "NG", alias = "NonGradable")]
    NonGradable,
}

/// Expert labels use the same three values as proposals.
pub type ScreeningLabel = Category;

impl Category {
    pub fn is_referable(self) -> bool {
        self != Category::NonReferable
    }
}

/// Raw RGB pixel buffer. Serialized as `{"width","height","rgb"}` with base64 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixels(pub RgbImage);

impl Serialize for Pixels {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PixelsRepr { width: self.0.width(), height: self.0.height(), rgb: B64.encode(self.0.as_raw()) }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pixels {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PixelsRepr::deserialize(deserializer)?;
        let bytes = B64.decode(repr.rgb).map_err(serde::de::Error::custom)?;
        RgbImage::from_raw(repr.width, repr.height, bytes)
            .map(Pixels)
            .ok_or_else(|| serde::de::Error::custom("pixel buffer does not match width*height*3"))
    }
}

#[derive(Serialize, Deserialize)]
struct PixelsRepr {
    width: u32,
    height: u32,
    rgb: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundusImage {
    pub image_id: String,
    pub pixels: Pixels,
    pub laterality: Laterality,
    pub acquisition_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl FundusImage {
    pub fn new(image_id: impl Into<String>, pixels: RgbImage, laterality: Laterality, acquisition_index: u32) -> Self {
        FundusImage {
            image_id: image_id.into(),
            pixels: Pixels(pixels),
            laterality,
            acquisition_index,
            source_tag: None,
        }
    }

    pub fn rgb(&self) -> &RgbImage {
        &self.pixels.0
    }

    pub fn width(&self) -> u32 {
        self.pixels.0.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.0.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeStudy {
    pub eye_id: String,
    pub laterality: Laterality,
    pub images: Vec<FundusImage>,
}

/// One broken invariant of an [`EyeStudy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyImageList,
    LateralityMismatch { image_id: String },
    ImageTooSmall { image_id: String, width: u32, height: u32 },
    DuplicateAcquisitionIndex { index: u32 },
    DuplicateImageId { image_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyImageList => write!(f, "empty image list"),
            Violation::LateralityMismatch { image_id } => {
                write!(f, "laterality mismatch on image {image_id}")
            }
            Violation::ImageTooSmall { image_id, width, height } => {
                write!(f, "image {image_id} is {width}x{height}, smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
            }
            Violation::DuplicateAcquisitionIndex { index } => {
                write!(f, "acquisition index {index} used more than once")
            }
            Violation::DuplicateImageId { image_id } => {
                write!(f, "image id {image_id} used more than once")
            }
        }
    }
}

/// Returns every invariant violation of `study`; an empty list means valid.
pub fn validate_study(study: &EyeStudy) -> Vec<Violation> {
    let mut out = Vec::new();
    if study.images.is_empty() {
        out.push(Violation::EmptyImageList);
        return out;
    }
    let mut seen_idx = std::collections::BTreeSet::new();
    let mut seen_id = std::collections::BTreeSet::new();
    for img in &study.images {
        if img.laterality != study.laterality {
            out.push(Violation::LateralityMismatch { image_id: img.image_id.clone() });
        }
        if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
            out.push(Violation::ImageTooSmall {
                image_id: img.image_id.clone(),
                width: img.width(),
                height: img.height(),
            });
        }
        if !seen_idx.insert(img.acquisition_index) {
            out.push(Violation::DuplicateAcquisitionIndex { index: img.acquisition_index });
        }
        if !seen_id.insert(img.image_id.as_str()) {
            out.push(Violation::DuplicateImageId { image_id: img.image_id.clone() });
        }
    }
    out
}

/// Circle highlighting a detected lesion cluster, in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCircle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Independent outputs of the DR and gradability classifiers for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub dr_prob: f64,
    pub non_gradability_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeProposal {
    pub laterality: Laterality,
    pub category: Category,
    pub referral_score: f64,
    #[serde(rename = "dr_score")]
    pub dr_score_transformed: f64,
    #[serde(rename = "non_gradability_score")]
    pub non_gradability_score_transformed: f64,
    pub selected_central: Option<String>,
    pub selected_nasal: Option<String>,
    pub annotations: Vec<AnnotationCircle>,
    /// Image the annotation circles refer to, in its pixel coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_image: Option<String>,
}

impl EyeProposal {
    /// Checks the proposal invariants against decision boundary `t_prime`.
    pub fn check_invariants(&self, t_prime: f64) -> Result<(), String> {
        let max = self.dr_score_transformed.max(self.non_gradability_score_transformed);
        if self.referral_score != max {
            return Err(format!("referral_score {} is not max of dr/non-gradability {}", self.referral_score, max));
        }
        if self.category.is_referable() != (self.referral_score >= t_prime) {
            return Err(format!(
                "category {:?} inconsistent with referral_score {}",
                self.category, self.referral_score
            ));
        }
        if !self.annotations.is_empty() && self.category != Category::ReferableDR {
            return Err("annotations present on a non-DR proposal".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyProposal {
    pub study_id: String,
    pub refer: bool,
    pub eyes: Vec<EyeProposal>,
}
