//! Per-eye screening policy: pick the central and nasal fields, score DR on
//! both and gradability on the central one, calibrate, move every score onto
//! the common decision boundary, and decide.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{annotate_map, attribute_dr, ClusterParams, DEFAULT_IG_STEPS};
use crate::backend::{BackendError, InferenceBackend};
use crate::calibration::{combine_referral_score, transform_score, CalibrationError, Calibrator, OperatingPoint};
use crate::par::Execution;
use crate::study::{
    validate_study, Category, EyeProposal, EyeStudy, FieldCategory, FieldScores, FundusImage, RawScores, StudyProposal,
    Violation,
};

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("invalid eye study: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidStudy(Vec<Violation>),
    #[error("screening unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid configuration: {0}")]
    Config(#[from] CalibrationError),
    #[error("a study needs one or two eyes, got {0}")]
    EyeCount(usize),
    #[error("field selection needs at least one image")]
    NoImages,
}

impl ScreeningError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ScreeningError::Backend(e) if e.is_retriable())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub operating_point: OperatingPoint,
    #[serde(default)]
    pub dr_calibrator: Option<Calibrator>,
    #[serde(default)]
    pub gradability_calibrator: Option<Calibrator>,
    #[serde(default)]
    pub clustering: ClusterParams,
    /// Compute lesion annotations for DR-referable eyes when the backend
    /// exposes gradients.
    #[serde(default = "default_true")]
    pub annotate: bool,
    #[serde(default = "default_steps")]
    pub ig_steps: usize,
    #[serde(default)]
    pub execution: Execution,
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    DEFAULT_IG_STEPS
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            operating_point: OperatingPoint::default(),
            dr_calibrator: None,
            gradability_calibrator: None,
            clustering: ClusterParams::default(),
            annotate: true,
            ig_steps: DEFAULT_IG_STEPS,
            execution: Execution::default(),
        }
    }
}

/// Images chosen as the central and nasal fields of an eye.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSelection {
    pub central: Option<String>,
    pub nasal: Option<String>,
}

/// Candidate image for field selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCandidate {
    pub image_id: String,
    pub acquisition_index: u32,
    pub scores: FieldScores,
}

fn argmax_field<'a>(
    candidates: impl Iterator<Item = &'a FieldCandidate>,
    field: FieldCategory,
) -> Option<&'a FieldCandidate> {
    candidates.fold(None, |best: Option<&FieldCandidate>, c| match best {
        None => Some(c),
        Some(b) => {
            let (pc, pb) = (c.scores.get(field), b.scores.get(field));
            if pc > pb || (pc == pb && c.acquisition_index < b.acquisition_index) {
                Some(c)
            } else {
                Some(b)
            }
        }
    })
}

/// Central = argmax P(Central); nasal = argmax P(Nasal) among the other
/// images. A lone image is taken as central. Ties go to the earlier
/// acquisition.
pub fn select_fields(candidates: &[FieldCandidate]) -> Result<FieldSelection, ScreeningError> {
    match candidates {
        [] => Err(ScreeningError::NoImages),
        [only] => Ok(FieldSelection { central: Some(only.image_id.clone()), nasal: None }),
        _ => {
            let central = argmax_field(candidates.iter(), FieldCategory::Central).unwrap();
            let nasal =
                argmax_field(candidates.iter().filter(|c| c.image_id != central.image_id), FieldCategory::Nasal);
            Ok(FieldSelection { central: Some(central.image_id.clone()), nasal: nasal.map(|n| n.image_id.clone()) })
        }
    }
}

/// Intermediate values behind an [`EyeProposal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeTrace {
    pub selection: FieldSelection,
    pub central_raw: RawScores,
    pub nasal_dr_raw: Option<f64>,
    pub dr_central: f64,
    pub dr_nasal: Option<f64>,
    pub non_gradability: f64,
}

fn calibrate(cal: &Option<Calibrator>, p: f64) -> f64 {
    cal.as_ref().map_or(p, |c| c.predict(p)).clamp(0.0, 1.0)
}

/// Category from transformed scores; DR wins when both are positive.
pub fn decide_category(dr_score: f64, non_gradability_score: f64, t_prime: f64) -> Category {
    if dr_score >= t_prime {
        Category::ReferableDR
    } else if non_gradability_score >= t_prime {
        Category::NonGradable
    } else {
        Category::NonReferable
    }
}

pub fn screen_eye(
    study: &EyeStudy,
    backend: &dyn InferenceBackend,
    config: &OrchestratorConfig,
) -> Result<EyeProposal, ScreeningError> {
    screen_eye_traced(study, backend, config).map(|(p, _)| p)
}

pub fn screen_eye_traced(
    study: &EyeStudy,
    backend: &dyn InferenceBackend,
    config: &OrchestratorConfig,
) -> Result<(EyeProposal, EyeTrace), ScreeningError> {
    let violations = validate_study(study);
    if !violations.is_empty() {
        return Err(ScreeningError::InvalidStudy(violations));
    }
    let op = config.operating_point;
    op.validate()?;
    let exec = config.execution;

    let selection = if study.images.len() == 1 {
        FieldSelection { central: Some(study.images[0].image_id.clone()), nasal: None }
    } else {
        let candidates = exec.try_map(&study.images, |img| {
            Ok::<_, BackendError>(FieldCandidate {
                image_id: img.image_id.clone(),
                acquisition_index: img.acquisition_index,
                scores: backend.classify_field(img)?,
            })
        })?;
        select_fields(&candidates)?
    };
    let find = |id: &Option<String>| -> Option<&FundusImage> {
        id.as_ref().and_then(|id| study.images.iter().find(|i| &i.image_id == id))
    };
    let central = find(&selection.central).ok_or(ScreeningError::NoImages)?;
    let nasal = find(&selection.nasal);

    let central_raw = backend.raw_scores(central)?;
    let nasal_dr_raw = nasal.map(|n| backend.score_dr(n)).transpose()?;

    let dr_t = |p: f64| transform_score(calibrate(&config.dr_calibrator, p), op.t_dr, op.t_prime);
    let dr_central = dr_t(central_raw.dr_prob)?;
    let dr_nasal = nasal_dr_raw.map(dr_t).transpose()?;
    let non_gradability = transform_score(
        calibrate(&config.gradability_calibrator, central_raw.non_gradability_prob),
        op.t_ng,
        op.t_prime,
    )?;

    let dr_score = dr_nasal.map_or(dr_central, |n| dr_central.max(n));
    let referral_score = combine_referral_score(dr_score, non_gradability);
    let category = decide_category(dr_score, non_gradability, op.t_prime);

    let (annotations, annotated_image) =
        if category == Category::ReferableDR && config.annotate && backend.gradient_model().is_some() {
            // Attribute on whichever field drove the DR score.
            let source = match (nasal, dr_nasal) {
                (Some(n), Some(s)) if s > dr_central => n,
                _ => central,
            };
            let map = attribute_dr(backend, source, config.ig_steps, exec)?;
            (annotate_map(&map, &config.clustering), Some(source.image_id.clone()))
        } else {
            (Vec::new(), None)
        };

    let proposal = EyeProposal {
        laterality: study.laterality,
        category,
        referral_score,
        dr_score_transformed: dr_score,
        non_gradability_score_transformed: non_gradability,
        selected_central: selection.central.clone(),
        selected_nasal: selection.nasal.clone(),
        annotations,
        annotated_image,
    };
    let trace = EyeTrace { selection, central_raw, nasal_dr_raw, dr_central, dr_nasal, non_gradability };
    Ok((proposal, trace))
}

/// Study-level decision: refer when any eye's referral score reaches `t_prime`.
pub fn screen_study(study_id: &str, eyes: Vec<EyeProposal>, t_prime: f64) -> Result<StudyProposal, ScreeningError> {
    if eyes.is_empty() || eyes.len() > 2 {
        return Err(ScreeningError::EyeCount(eyes.len()));
    }
    let refer = eyes.iter().any(|e| e.referral_score >= t_prime);
    Ok(StudyProposal { study_id: study_id.to_string(), refer, eyes })
}

/// Screens every eye of a study and combines them.
pub fn screen_full_study(
    study_id: &str,
    eyes: &[EyeStudy],
    backend: &dyn InferenceBackend,
    config: &OrchestratorConfig,
) -> Result<StudyProposal, ScreeningError> {
    if eyes.is_empty() || eyes.len() > 2 {
        return Err(ScreeningError::EyeCount(eyes.len()));
    }
    let proposals = config.execution.try_map(eyes, |e| screen_eye(e, backend, config))?;
    screen_study(study_id, proposals, config.operating_point.t_prime)
}

/// A study awaiting screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyInput {
    pub study_id: String,
    pub eyes: Vec<EyeStudy>,
}

/// Screens many studies; one result per input, in input order.
pub fn screen_batch(
    studies: &[StudyInput],
    backend: &dyn InferenceBackend,
    config: &OrchestratorConfig,
    exec: Execution,
) -> Vec<Result<StudyProposal, ScreeningError>> {
    exec.map(studies, |s| screen_full_study(&s.study_id, &s.eyes, backend, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::study::Laterality;
    use image::RgbImage;

    fn fs(central: f64, nasal: f64) -> FieldScores {
        let rest = (1.0 - central - nasal) / 5.0;
        FieldScores([central, nasal, rest, rest, rest, rest, rest])
    }

    fn cand(id: &str, idx: u32, c: f64, n: f64) -> FieldCandidate {
        FieldCandidate { image_id: id.into(), acquisition_index: idx, scores: fs(c, n) }
    }

    #[test]
    fn select_by_argmax() {
        let sel =
            select_fields(&[cand("img1", 0, 0.9, 0.05), cand("img2", 1, 0.1, 0.8), cand("img3", 2, 0.2, 0.3)]).unwrap();
        assert_eq!(sel.central.as_deref(), Some("img1"));
        assert_eq!(sel.nasal.as_deref(), Some("img2"));
    }

    #[test]
    fn single_image_is_central() {
        let sel = select_fields(&[cand("only", 3, 0.0, 1.0)]).unwrap();
        assert_eq!(sel, FieldSelection { central: Some("only".into()), nasal: None });
        assert!(matches!(select_fields(&[]), Err(ScreeningError::NoImages)));
    }

    #[test]
    fn ties_go_to_earlier_acquisition() {
        let sel = select_fields(&[cand("late", 5, 0.5, 0.1), cand("early", 2, 0.5, 0.2)]).unwrap();
        assert_eq!(sel.central.as_deref(), Some("early"));
        assert_eq!(sel.nasal.as_deref(), Some("late"));
    }

    fn eye(ids: &[&str]) -> EyeStudy {
        EyeStudy {
            eye_id: "eye".into(),
            laterality: Laterality::Right,
            images: ids
                .iter()
                .enumerate()
                .map(|(i, id)| FundusImage::new(*id, RgbImage::new(64, 64), Laterality::Right, i as u32))
                .collect(),
        }
    }

    /// Identity calibration with t = t' = 0.5 makes transformed == raw.
    fn identity_config() -> OrchestratorConfig {
        OrchestratorConfig {
            operating_point: OperatingPoint { t_dr: 0.5, t_ng: 0.5, t_prime: 0.5 },
            ..Default::default()
        }
    }

    fn scripted(central: (f64, f64), nasal_dr: f64) -> ScriptedBackend {
        ScriptedBackend::new()
            .with("c", fs(0.9, 0.05), RawScores { dr_prob: central.0, non_gradability_prob: central.1 })
            .with("n", fs(0.05, 0.9), RawScores { dr_prob: nasal_dr, non_gradability_prob: 0.99 })
    }

    #[test]
    fn decision_examples() {
        let cfg = identity_config();
        let p = screen_eye(&eye(&["c", "n"]), &scripted((0.7, 0.2), 0.3), &cfg).unwrap();
        assert_eq!((p.category, p.referral_score), (Category::ReferableDR, 0.7));

        let p = screen_eye(&eye(&["c", "n"]), &scripted((0.3, 0.8), 0.2), &cfg).unwrap();
        assert_eq!((p.category, p.referral_score), (Category::NonGradable, 0.8));

        let p = screen_eye(&eye(&["c", "n"]), &scripted((0.6, 0.9), 0.1), &cfg).unwrap();
        assert_eq!((p.category, p.referral_score), (Category::ReferableDR, 0.9));

        let p = screen_eye(&eye(&["c", "n"]), &scripted((0.2, 0.3), 0.4), &cfg).unwrap();
        assert_eq!((p.category, p.referral_score), (Category::NonReferable, 0.4));
        p.check_invariants(0.5).unwrap();
    }

    #[test]
    fn gradability_ignores_nasal_field() {
        // Nasal image is scripted as non-gradable; only central counts.
        let p = screen_eye(&eye(&["c", "n"]), &scripted((0.1, 0.1), 0.1), &identity_config()).unwrap();
        assert_eq!(p.category, Category::NonReferable);
        assert!((p.non_gradability_score_transformed - 0.1).abs() < 1e-12);
    }

    #[test]
    fn study_level_or() {
        let mk = |s: f64, c: Category| EyeProposal {
            laterality: Laterality::Left,
            category: c,
            referral_score: s,
            dr_score_transformed: s,
            non_gradability_score_transformed: 0.0,
            selected_central: None,
            selected_nasal: None,
            annotations: vec![],
            annotated_image: None,
        };
        let nr = mk(0.2, Category::NonReferable);
        assert!(screen_study("s", vec![nr.clone(), mk(0.7, Category::ReferableDR)], 0.5).unwrap().refer);
        assert!(!screen_study("s", vec![nr.clone(), nr.clone()], 0.5).unwrap().refer);
        assert!(screen_study("s", vec![mk(0.8, Category::NonGradable)], 0.5).unwrap().refer);
        assert!(matches!(screen_study("s", vec![], 0.5), Err(ScreeningError::EyeCount(0))));
        assert!(matches!(screen_study("s", vec![nr.clone(), nr.clone(), nr], 0.5), Err(ScreeningError::EyeCount(3))));
    }

    #[test]
    fn invalid_study_and_outage() {
        let empty = EyeStudy { eye_id: "e".into(), laterality: Laterality::Left, images: vec![] };
        assert!(matches!(
            screen_eye(&empty, &ScriptedBackend::new(), &identity_config()),
            Err(ScreeningError::InvalidStudy(_))
        ));
        let down = ScriptedBackend { unavailable: true, ..Default::default() };
        let err = screen_eye(&eye(&["c"]), &down, &identity_config()).unwrap_err();
        assert!(err.is_retriable());
    }
}
