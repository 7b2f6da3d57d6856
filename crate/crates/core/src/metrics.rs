//! Agreement and discrimination statistics: sensitivity/specificity, AUC,
//! Cohen's kappa, positive/negative agreement and percentile bootstrap CIs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("rate undefined: {0}")]
    UndefinedRate(&'static str),
    #[error("class {0} absent from labels")]
    MissingClass(usize),
    #[error("statistic undefined on {undefined} of {attempts} bootstrap draws")]
    BootstrapUndefined { undefined: usize, attempts: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(predictions: &[bool], truth: &[bool]) -> Result<Self, MetricsError> {
        if predictions.len() != truth.len() {
            return Err(MetricsError::LengthMismatch(predictions.len(), truth.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predictions.iter().zip(truth) {
            c.add(p, t);
        }
        Ok(c)
    }

    pub fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn sensitivity(&self) -> Result<f64, MetricsError> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity with no positives")
    }

    pub fn specificity(&self) -> Result<f64, MetricsError> {
        ratio(self.tn, self.tn + self.fp, "specificity with no negatives")
    }
}

fn ratio(num: usize, den: usize, what: &'static str) -> Result<f64, MetricsError> {
    if den == 0 {
        Err(MetricsError::UndefinedRate(what))
    } else {
        Ok(num as f64 / den as f64)
    }
}

pub fn sensitivity_specificity(c: &ConfusionCounts) -> Result<(f64, f64), MetricsError> {
    Ok((c.sensitivity()?, c.specificity()?))
}

/// Cohen's kappa for two raters over `k` classes (labels are class indices).
pub fn cohen_kappa(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = a.iter().chain(b).copied().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut ma = vec![0.0; k];
    let mut mb = vec![0.0; k];
    let mut agree = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1.0;
        mb[y] += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = ma.iter().zip(&mb).map(|(x, y)| (x / n) * (y / n)).sum();
    if p_e == 1.0 {
        // Both raters used a single identical class throughout.
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn cohen_kappa_binary(a: &[bool], b: &[bool]) -> Result<f64, MetricsError> {
    let a: Vec<usize> = a.iter().map(|&x| x as usize).collect();
    let b: Vec<usize> = b.iter().map(|&x| x as usize).collect();
    cohen_kappa(&a, &b)
}

/// Mann-Whitney AUC: probability a random positive outscores a random
/// negative, with ties counted as one half.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(MetricsError::UndefinedRate("AUC with no positives"));
    }
    if n_neg == 0 {
        return Err(MetricsError::UndefinedRate("AUC with no negatives"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Support-weighted one-vs-rest AUC over `k` classes. `scores[i][c]` is
/// sample `i`'s score for class `c`.
pub fn weighted_ovr_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let supports: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    if let Some(missing) = supports.iter().position(|&s| s == 0) {
        return Err(MetricsError::MissingClass(missing));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (class, &support) in supports.iter().enumerate() {
        let col: Vec<f64> = scores.iter().map(|row| row[class]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += support as f64 / n * auc_binary(&col, &bin)?;
    }
    Ok(total)
}

/// ROC curve points `(fpr, tpr)` from the highest threshold down.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(MetricsError::UndefinedRate("ROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n_neg, tp / n_pos));
    }
    Ok(pts)
}

/// Positive and negative agreement of a human with AI proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// Share of AI referral proposals the human also referred; `None` when
    /// the AI never proposed referral.
    pub pa: Option<f64>,
    /// Share of AI non-referral proposals the human also did not refer.
    pub na: Option<f64>,
    pub kappa: f64,
    pub n: usize,
}

pub fn positive_negative_agreement(ai: &[bool], human: &[bool]) -> Result<AgreementStats, MetricsError> {
    if ai.len() != human.len() {
        return Err(MetricsError::LengthMismatch(ai.len(), human.len()));
    }
    if ai.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = ConfusionCounts::from_pairs(human, ai)?;
    // Here "truth" is the AI proposal: tp = both refer, fn = AI refers alone.
    Ok(AgreementStats {
        pa: ratio(c.tp, c.tp + c.fn_, "").ok(),
        na: ratio(c.tn, c.tn + c.fp, "").ok(),
        kappa: cohen_kappa_binary(ai, human)?,
        n: ai.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub confidence: f64,
    pub resamples: usize,
    pub seed: u64,
    /// Percentile intervals can miss the point estimate; flagged, not fixed.
    pub point_outside: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 2000, confidence: 0.95, seed: 0 }
    }
}

const MAX_REDRAWS: usize = 10;

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over the units in `data`.
///
/// Resample `i` draws from its own generator seeded with `seed + i`, so the
/// result does not depend on execution mode. Draws on which the statistic is
/// undefined are redrawn up to ten times.
pub fn bootstrap_ci<T, F>(
    data: &[T],
    statistic: F,
    config: &BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapCI, MetricsError>
where
    T: Clone + Sync + Send,
    F: Fn(&[T]) -> Option<f64> + Sync + Send,
{
    if data.is_empty() {
        return Err(MetricsError::Empty);
    }
    let point = statistic(data).ok_or(MetricsError::UndefinedRate("statistic on full data"))?;
    let results = exec.map_range(config.resamples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
        let mut sample = Vec::with_capacity(data.len());
        let mut undefined = 0;
        for _ in 0..MAX_REDRAWS {
            sample.clear();
            sample.extend((0..data.len()).map(|_| data[rng.random_range(0..data.len())].clone()));
            match statistic(&sample) {
                Some(v) => return (Some(v), undefined + 1),
                None => undefined += 1,
            }
        }
        (None, undefined)
    });
    let attempts: usize = results.iter().map(|r| r.1).sum();
    let mut values: Vec<f64> = results.iter().filter_map(|r| r.0).collect();
    let undefined = attempts - values.len();
    if values.is_empty() || undefined as f64 > 0.9 * attempts as f64 {
        return Err(MetricsError::BootstrapUndefined { undefined, attempts });
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.confidence) / 2.0;
    let lo = quantile(&values, alpha);
    let hi = quantile(&values, 1.0 - alpha);
    Ok(BootstrapCI {
        point,
        lo,
        hi,
        confidence: config.confidence,
        resamples: config.resamples,
        seed: config.seed,
        point_outside: point < lo || point > hi,
    })
}

/// Row of a metric report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, ci: &BootstrapCI, n: usize) -> Self {
        MetricReport { metric: metric.into(), point: ci.point, ci_lo: ci.lo, ci_hi: ci.hi, n, seed: ci.seed }
    }
}
