//! Expert-consensus evaluation: majority ground truth, the three binary
//! evaluation tasks, leave-one-out comparison of each expert, study-level
//! binarization and sample-size arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    auc_binary, bootstrap_ci, cohen_kappa_binary, BootstrapCI, BootstrapConfig, ConfusionCounts, MetricsError,
};
use crate::par::Execution;
use crate::study::{Category, EyeProposal, ScreeningLabel};

#[derive(Debug, Error, PartialEq)]
pub enum GoldStandardError {
    #[error("expected exactly 3 expert labels, got {0}")]
    LabelCount(usize),
    #[error("unknown task {0}; expected 1, 2 or 3")]
    UnknownTask(u8),
    #[error("a study needs one or two eyes, got {0}")]
    EyeCount(usize),
    #[error("expert index {0} out of range")]
    ExpertIndex(usize),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One line of a labeled-eyes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEye {
    pub eye_id: String,
    /// Groups fellow eyes for study-level comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<String>,
    pub labels: Vec<ScreeningLabel>,
    pub system: EyeProposal,
    /// Real-world first-level decision for the whole study, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_refer: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthEye {
    pub eye_id: String,
    pub consensus: Option<ScreeningLabel>,
    pub discarded: bool,
}

/// Simple-majority label of three experts; `None` when all three differ.
pub fn consensus_label(labels: &[ScreeningLabel]) -> Result<Option<ScreeningLabel>, GoldStandardError> {
    let [a, b, c] = labels else {
        return Err(GoldStandardError::LabelCount(labels.len()));
    };
    Ok(if a == b || a == c {
        Some(*a)
    } else if b == c {
        Some(*b)
    } else {
        None
    })
}

pub fn ground_truth(eye: &LabeledEye) -> Result<GroundTruthEye, GoldStandardError> {
    let consensus = consensus_label(&eye.labels)?;
    Ok(GroundTruthEye { eye_id: eye.eye_id.clone(), consensus, discarded: consensus.is_none() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Refer or not, regardless of motivation.
    Screening = 1,
    /// Referable DR or not; eyes with non-gradable consensus excluded.
    DrClassification = 2,
    /// Non-gradable or not.
    Gradability = 3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Screening, Task::DrClassification, Task::Gradability];

    pub fn from_id(id: u8) -> Result<Self, GoldStandardError> {
        match id {
            1 => Ok(Task::Screening),
            2 => Ok(Task::DrClassification),
            3 => Ok(Task::Gradability),
            _ => Err(GoldStandardError::UnknownTask(id)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Screening => "dr_screening",
            Task::DrClassification => "dr_classification",
            Task::Gradability => "gradability_classification",
        }
    }

    fn system_score(self, p: &EyeProposal) -> f64 {
        match self {
            Task::Screening => p.referral_score,
            Task::DrClassification => p.dr_score_transformed,
            Task::Gradability => p.non_gradability_score_transformed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub eye_id: String,
    pub prediction: bool,
    pub truth: bool,
    /// Continuous system score behind the prediction, for AUC.
    pub score: f64,
}

/// Binary `(prediction, truth)` pairs of one task over non-discarded eyes.
pub fn build_task_dataset(eyes: &[(GroundTruthEye, EyeProposal)], task: Task, t_prime: f64) -> Vec<TaskPair> {
    eyes.iter()
        .filter_map(|(gt, sys)| {
            let consensus = gt.consensus.filter(|_| !gt.discarded)?;
            let (prediction, truth) = match task {
                Task::Screening => (sys.referral_score >= t_prime, consensus.is_referable()),
                Task::DrClassification => {
                    if consensus == Category::NonGradable {
                        return None;
                    }
                    (sys.category == Category::ReferableDR, consensus == Category::ReferableDR)
                }
                Task::Gradability => (sys.category == Category::NonGradable, consensus == Category::NonGradable),
            };
            Some(TaskPair { eye_id: gt.eye_id.clone(), prediction, truth, score: task.system_score(sys) })
        })
        .collect()
}

/// Confusion counts of expert `expert` against the other two experts'
/// shared referral decision; when they disagree the system's referral bit
/// decides.
pub fn leave_one_out_expert_eval(
    eyes: &[LabeledEye],
    expert: usize,
    t_prime: f64,
) -> Result<ConfusionCounts, GoldStandardError> {
    Ok(ConfusionCounts::from_pairs_iter(leave_one_out_pairs(eyes, expert, t_prime)?))
}

fn leave_one_out_pairs(
    eyes: &[LabeledEye],
    expert: usize,
    t_prime: f64,
) -> Result<Vec<(bool, bool)>, GoldStandardError> {
    if expert > 2 {
        return Err(GoldStandardError::ExpertIndex(expert));
    }
    eyes.iter()
        .map(|e| {
            if e.labels.len() != 3 {
                return Err(GoldStandardError::LabelCount(e.labels.len()));
            }
            let others: Vec<bool> = (0..3).filter(|&i| i != expert).map(|i| e.labels[i].is_referable()).collect();
            let truth = if others[0] == others[1] { others[0] } else { e.system.referral_score >= t_prime };
            Ok((e.labels[expert].is_referable(), truth))
        })
        .collect()
}

impl ConfusionCounts {
    pub fn from_pairs_iter(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, t) in pairs {
            c.add(p, t);
        }
        c
    }
}

/// Study-level pair: a study is positive when any of its 1-2 eyes is.
pub fn study_level_referral(eyes: &[(bool, bool)]) -> Result<(bool, bool), GoldStandardError> {
    if eyes.is_empty() || eyes.len() > 2 {
        return Err(GoldStandardError::EyeCount(eyes.len()));
    }
    Ok((eyes.iter().any(|e| e.0), eyes.iter().any(|e| e.1)))
}

/// `ceil` that forgives floating-point noise just above an integer.
fn ceil_tolerant(x: f64) -> u64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSize {
    pub positives_needed: f64,
    pub n: u64,
}

/// Normal-approximation sample size to estimate a sensitivity of
/// `expected_sens` within `half_width` at critical value `z`.
pub fn sample_size_for_sensitivity(expected_sens: f64, half_width: f64, z: f64, prevalence: f64) -> SampleSize {
    let positives_needed = z * z * expected_sens * (1.0 - expected_sens) / (half_width * half_width);
    SampleSize { positives_needed, n: ceil_tolerant(positives_needed / prevalence) }
}

/// Size of a dataset with prevalence `prev2` holding as many expected
/// positives as `n1` samples at prevalence `prev1`.
pub fn adjust_for_prevalence(n1: u64, prev1: f64, prev2: f64) -> u64 {
    ceil_tolerant(n1 as f64 * prev1 / prev2)
}

/// Metrics of one rater on one binary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterMetrics {
    pub rater: String,
    pub n: usize,
    pub counts: ConfusionCounts,
    pub sensitivity: Option<BootstrapCI>,
    pub specificity: Option<BootstrapCI>,
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<BootstrapCI>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReport {
    pub n_eyes: usize,
    pub discarded: Vec<String>,
    /// One row per task: the system against expert consensus.
    pub tasks: Vec<(Task, RaterMetrics)>,
    /// Screening task: each expert and the system against the other two.
    pub leave_one_out: Vec<RaterMetrics>,
    /// Study-level screening: system and first-level GPs against consensus.
    pub study_level: Vec<RaterMetrics>,
}

fn rate_ci(
    pairs: &[(bool, bool, f64)],
    positive_truth: bool,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Option<BootstrapCI> {
    let stat = |s: &[(bool, bool, f64)]| {
        let rel: Vec<_> = s.iter().filter(|p| p.1 == positive_truth).collect();
        if rel.is_empty() {
            return None;
        }
        Some(rel.iter().filter(|p| p.0 == positive_truth).count() as f64 / rel.len() as f64)
    };
    bootstrap_ci(pairs, stat, cfg, exec).ok()
}

fn rater_metrics(
    rater: &str,
    pairs: &[(bool, bool, f64)],
    with_auc: bool,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> RaterMetrics {
    let preds: Vec<bool> = pairs.iter().map(|p| p.0).collect();
    let truth: Vec<bool> = pairs.iter().map(|p| p.1).collect();
    let auc = if with_auc {
        bootstrap_ci(
            pairs,
            |s| {
                let sc: Vec<f64> = s.iter().map(|p| p.2).collect();
                let tr: Vec<bool> = s.iter().map(|p| p.1).collect();
                auc_binary(&sc, &tr).ok()
            },
            cfg,
            exec,
        )
        .ok()
    } else {
        None
    };
    RaterMetrics {
        rater: rater.to_string(),
        n: pairs.len(),
        counts: ConfusionCounts::from_pairs_iter(preds.iter().copied().zip(truth.iter().copied())),
        sensitivity: rate_ci(pairs, true, cfg, exec),
        specificity: rate_ci(pairs, false, cfg, exec),
        kappa: if pairs.is_empty() { None } else { cohen_kappa_binary(&preds, &truth).ok() },
        auc,
    }
}

/// Full evaluation of a labeled-eyes set.
pub fn evaluate(
    eyes: &[LabeledEye],
    t_prime: f64,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<GoldReport, GoldStandardError> {
    let truths: Vec<GroundTruthEye> = eyes.iter().map(ground_truth).collect::<Result<_, _>>()?;
    let discarded: Vec<String> = truths.iter().filter(|t| t.discarded).map(|t| t.eye_id.clone()).collect();
    let joined: Vec<(GroundTruthEye, EyeProposal)> =
        truths.iter().cloned().zip(eyes.iter().map(|e| e.system.clone())).collect();

    let mut tasks = Vec::new();
    for task in Task::ALL {
        let pairs: Vec<(bool, bool, f64)> =
            build_task_dataset(&joined, task, t_prime).into_iter().map(|p| (p.prediction, p.truth, p.score)).collect();
        tasks.push((task, rater_metrics("system", &pairs, true, cfg, exec)));
    }

    let kept: Vec<LabeledEye> =
        eyes.iter().zip(&truths).filter(|(_, t)| !t.discarded).map(|(e, _)| e.clone()).collect();
    let mut leave_one_out = Vec::new();
    for expert in 0..3 {
        let pairs: Vec<(bool, bool, f64)> =
            leave_one_out_pairs(&kept, expert, t_prime)?.into_iter().map(|(p, t)| (p, t, 0.0)).collect();
        leave_one_out.push(rater_metrics(&format!("expert_{}", expert + 1), &pairs, false, cfg, exec));
        // The system judged against the same two-expert reference.
        let sys_pairs: Vec<(bool, bool, f64)> = kept
            .iter()
            .zip(leave_one_out_pairs(&kept, expert, t_prime)?)
            .map(|(e, (_, t))| (e.system.referral_score >= t_prime, t, e.system.referral_score))
            .collect();
        leave_one_out.push(rater_metrics(
            &format!("system_vs_expert_{}_peers", expert + 1),
            &sys_pairs,
            false,
            cfg,
            exec,
        ));
    }

    let study_level = study_level_metrics(&kept, &truths, t_prime, cfg, exec)?;
    Ok(GoldReport { n_eyes: eyes.len(), discarded, tasks, leave_one_out, study_level })
}

fn study_level_metrics(
    kept: &[LabeledEye],
    truths: &[GroundTruthEye],
    t_prime: f64,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<Vec<RaterMetrics>, GoldStandardError> {
    use std::collections::BTreeMap;
    let consensus: BTreeMap<&str, Category> =
        truths.iter().filter_map(|t| t.consensus.map(|c| (t.eye_id.as_str(), c))).collect();
    let mut studies: BTreeMap<&str, Vec<&LabeledEye>> = BTreeMap::new();
    for e in kept {
        if let Some(s) = &e.study_id {
            studies.entry(s.as_str()).or_default().push(e);
        }
    }
    let mut sys_pairs = Vec::new();
    let mut gp_pairs = Vec::new();
    for eyes in studies.values() {
        let per_eye: Vec<(bool, bool)> = eyes
            .iter()
            .map(|e| (e.system.referral_score >= t_prime, consensus[e.eye_id.as_str()].is_referable()))
            .collect();
        let (pred, truth) = study_level_referral(&per_eye)?;
        let gp = eyes.iter().find_map(|e| e.gp_refer);
        if let Some(gp) = gp {
            // Compare on the subset with a recorded GP decision, as for the GP row.
            sys_pairs.push((pred, truth, 0.0));
            gp_pairs.push((gp, truth, 0.0));
        }
    }
    if sys_pairs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![rater_metrics("system", &sys_pairs, false, cfg, exec), rater_metrics("gp", &gp_pairs, false, cfg, exec)])
}
