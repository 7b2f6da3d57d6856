//! Probability post-processing: Beta and isotonic calibration, calibration
//! diagnostics, operating-point selection and the display transform that
//! moves a decision threshold onto a fixed decision boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scores are clamped into `[EPS, 1 - EPS]` before taking logarithms.
pub const SCORE_EPS: f64 = 1e-12;
const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("labels contain a single class; cannot fit")]
    SingleClass,
    #[error("beta calibration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    InvalidThreshold(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("all scores are equal; no candidate threshold exists")]
    NoCandidateThreshold,
    #[error("number of bins must be at least 1")]
    InvalidBins,
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<(), CalibrationError> {
    if scores.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    Ok(())
}

fn check_both_classes(labels: &[bool]) -> Result<(), CalibrationError> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(CalibrationError::SingleClass);
    }
    Ok(())
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Order-preserving piecewise-linear map sending threshold `t` to boundary `t_prime`.
///
/// `p <= t` lands in `[0, t_prime]`, `p > t` in `(t_prime, 2 t_prime]`.
pub fn transform_score(p: f64, t: f64, t_prime: f64) -> Result<f64, CalibrationError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(CalibrationError::InvalidThreshold(t));
    }
    if !(t_prime > 0.0 && t_prime < 1.0) {
        return Err(CalibrationError::InvalidThreshold(t_prime));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(CalibrationError::InvalidProbability(p));
    }
    Ok(if p > t { t_prime * (1.0 + (p - t) / (1.0 - t)) } else { t_prime * (1.0 + (p - t) / t) })
}

/// Eye-level referral score: the larger of the two transformed scores.
pub fn combine_referral_score(dr_score: f64, non_gradability_score: f64) -> f64 {
    dr_score.max(non_gradability_score)
}

/// Decision thresholds for both classifiers plus the display boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub t_dr: f64,
    pub t_ng: f64,
    pub t_prime: f64,
}

impl Default for OperatingPoint {
    fn default() -> Self {
        OperatingPoint { t_dr: 0.1, t_ng: 0.5, t_prime: 0.5 }
    }
}

impl OperatingPoint {
    /// Thresholds must lie in (0, 1). `t_prime` is further capped at 0.5:
    /// the transform maps p = 1 to `2 t_prime`, so larger values would push
    /// scores above 1.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        for t in [self.t_dr, self.t_ng, self.t_prime] {
            if !(t > 0.0 && t < 1.0) {
                return Err(CalibrationError::InvalidThreshold(t));
            }
        }
        if self.t_prime > 0.5 {
            return Err(CalibrationError::InvalidThreshold(self.t_prime));
        }
        Ok(())
    }
}

/// Parametric calibration map `logistic(c + a ln p - b ln(1 - p))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaCalibrator {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BetaCalibrator {
    pub const IDENTITY: BetaCalibrator = BetaCalibrator { a: 1.0, b: 1.0, c: 0.0 };

    pub fn predict(&self, p: f64) -> f64 {
        let p = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        logistic(self.c + self.a * p.ln() - self.b * (1.0 - p).ln())
    }

    /// Maximum-likelihood fit by Newton iterations.
    ///
    /// A negative shape coefficient is pinned to zero and the remaining
    /// parameters refitted, which keeps the map monotone.
    pub fn fit(scores: &[f64], labels: &[bool]) -> Result<Self, CalibrationError> {
        check_pairs(scores, labels)?;
        check_both_classes(labels)?;
        let features: Vec<[f64; 3]> = scores
            .iter()
            .map(|&s| {
                let p = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
                [p.ln(), -(1.0 - p).ln(), 1.0]
            })
            .collect();

        let mut active = [true, true, true];
        let mut theta = newton_logistic(&features, labels, active, [1.0, 1.0, 0.0])?;
        if theta[0] < 0.0 || theta[1] < 0.0 {
            // Pin the more negative coefficient first; refit; repeat once.
            let first = if theta[0] < theta[1] { 0 } else { 1 };
            active[first] = false;
            let mut start = theta;
            start[first] = 0.0;
            theta = newton_logistic(&features, labels, active, start)?;
            let other = 1 - first;
            if theta[other] < 0.0 {
                active[other] = false;
                let mut start = theta;
                start[other] = 0.0;
                theta = newton_logistic(&features, labels, active, start)?;
            }
        }
        Ok(BetaCalibrator { a: theta[0], b: theta[1], c: theta[2] })
    }
}

fn log_likelihood(features: &[[f64; 3]], labels: &[bool], theta: [f64; 3]) -> f64 {
    features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2];
            // log(sigma(z)) and log(1 - sigma(z)) without cancellation.
            let log1pexp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            if y {
                z - log1pexp
            } else {
                -log1pexp
            }
        })
        .sum()
}

/// Newton-Raphson for logistic regression on the `active` coordinates; the
/// inactive ones stay at their `start` value.
fn newton_logistic(
    features: &[[f64; 3]],
    labels: &[bool],
    active: [bool; 3],
    start: [f64; 3],
) -> Result<[f64; 3], CalibrationError> {
    let idx: Vec<usize> = (0..3).filter(|&i| active[i]).collect();
    let k = idx.len();
    let mut theta = start;
    let mut ll = log_likelihood(features, labels, theta);
    for iter in 1..=NEWTON_MAX_ITER {
        let mut grad = [0.0; 3];
        let mut hess = [[0.0; 3]; 3];
        for (x, &y) in features.iter().zip(labels) {
            let z = theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2];
            let s = logistic(z);
            let r = if y { 1.0 } else { 0.0 } - s;
            let w = s * (1.0 - s);
            for (ii, &i) in idx.iter().enumerate() {
                grad[ii] += r * x[i];
                for (jj, &j) in idx.iter().enumerate() {
                    hess[ii][jj] += w * x[i] * x[j];
                }
            }
        }
        let step = solve_spd(&hess, &grad, k);
        let max_step = step[..k].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_step < NEWTON_TOL {
            return Ok(theta);
        }
        // Backtracking keeps the likelihood non-decreasing.
        let mut scale = 1.0;
        loop {
            let mut cand = theta;
            for (ii, &i) in idx.iter().enumerate() {
                cand[i] += scale * step[ii];
            }
            let cand_ll = log_likelihood(features, labels, cand);
            if cand_ll >= ll - 1e-12 || scale < 1e-10 {
                theta = cand;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(CalibrationError::NonConvergence { iterations: iter });
        }
    }
    Err(CalibrationError::NonConvergence { iterations: NEWTON_MAX_ITER })
}

/// Solves `H x = g` for the leading `k x k` block. Rank-deficient systems get
/// a vanishing ridge, which yields the minimum-norm-like Newton direction.
fn solve_spd(h: &[[f64; 3]; 3], g: &[f64; 3], k: usize) -> [f64; 3] {
    let scale = (0..k).map(|i| h[i][i].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut ridge = 0.0;
    loop {
        let mut a = [[0.0; 4]; 3];
        for i in 0..k {
            for j in 0..k {
                a[i][j] = h[i][j];
            }
            a[i][i] += ridge;
            a[i][3] = g[i];
        }
        if let Some(x) = gauss_solve(&mut a, k, scale * 1e-13) {
            return x;
        }
        ridge = if ridge == 0.0 { scale * 1e-10 } else { ridge * 100.0 };
    }
}

fn gauss_solve(a: &mut [[f64; 4]; 3], k: usize, tiny: f64) -> Option<[f64; 3]> {
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() <= tiny {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            let pivot = a[col];
            for (x, p) in a[row].iter_mut().zip(pivot).skip(col) {
                *x -= f * p;
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..k).rev() {
        let mut acc = a[row][3];
        for c in row + 1..k {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Pool-adjacent-violators: the non-decreasing sequence minimizing
/// `sum w_i (v_i - y_i)^2`.
pub fn pool_adjacent_violators(y: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), w.len());
    // (weighted sum, total weight, member count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi * wi, wi, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (s1, w1, _) = blocks[n - 2];
            let (s2, w2, _) = blocks[n - 1];
            if s1 / w1 > s2 / w2 {
                let (_, _, c2) = blocks.pop().unwrap();
                let last = blocks.last_mut().unwrap();
                last.0 += s2;
                last.1 += w2;
                last.2 += c2;
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (s, w, c) in blocks {
        out.extend(std::iter::repeat_n(s / w, c));
    }
    out
}

/// Monotone step-free calibration map: linear interpolation between knots,
/// clamped beyond the first and last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    pub knots: Vec<(f64, f64)>,
}

impl IsotonicCalibrator {
    pub fn fit(scores: &[f64], labels: &[bool]) -> Result<Self, CalibrationError> {
        check_pairs(scores, labels)?;
        check_both_classes(labels)?;
        let mut pairs: Vec<(f64, f64)> =
            scores.iter().zip(labels).map(|(&s, &l)| (s, if l { 1.0 } else { 0.0 })).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Tied scores must share a value, so pool them before PAV.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for (s, l) in pairs {
            if xs.last() == Some(&s) {
                let n = ys.len() - 1;
                ys[n] = (ys[n] * ws[n] + l) / (ws[n] + 1.0);
                ws[n] += 1.0;
            } else {
                xs.push(s);
                ys.push(l);
                ws.push(1.0);
            }
        }
        let fitted = pool_adjacent_violators(&ys, &ws);
        Ok(IsotonicCalibrator { knots: xs.into_iter().zip(fitted).collect() })
    }

    pub fn predict(&self, p: f64) -> f64 {
        let k = &self.knots;
        match k.len() {
            0 => p,
            1 => k[0].1,
            _ => {
                if p <= k[0].0 {
                    return k[0].1;
                }
                if p >= k[k.len() - 1].0 {
                    return k[k.len() - 1].1;
                }
                let hi = k.partition_point(|&(s, _)| s <= p);
                let (x0, y0) = k[hi - 1];
                let (x1, y1) = k[hi];
                y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            }
        }
    }
}

/// A fitted calibrator as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Calibrator {
    Beta(BetaCalibrator),
    Isotonic(IsotonicCalibrator),
}

impl Calibrator {
    pub fn predict(&self, p: f64) -> f64 {
        match self {
            Calibrator::Beta(c) => c.predict(p),
            Calibrator::Isotonic(c) => c.predict(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_prob: f64,
    pub frac_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub bins: Vec<CalibrationBin>,
}

/// ECE, MCE and Brier score over `n_bins` equal-width bins on `[0, 1]`.
pub fn calibration_report(
    scores: &[f64],
    labels: &[bool],
    n_bins: usize,
) -> Result<CalibrationReport, CalibrationError> {
    check_pairs(scores, labels)?;
    if n_bins == 0 {
        return Err(CalibrationError::InvalidBins);
    }
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    let mut brier = 0.0;
    for (&p, &l) in scores.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(CalibrationError::InvalidProbability(p));
        }
        let y = if l { 1.0 } else { 0.0 };
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sum_p[b] += p;
        sum_y[b] += y;
        count[b] += 1;
        brier += (p - y) * (p - y);
    }
    let n = scores.len() as f64;
    let mut ece = 0.0;
    let mut mce = 0.0f64;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if count[b] == 0 {
            bins.push(CalibrationBin { count: 0, mean_prob: 0.0, frac_positive: 0.0 });
            continue;
        }
        let c = count[b] as f64;
        let mean_prob = sum_p[b] / c;
        let frac_positive = sum_y[b] / c;
        let gap = (mean_prob - frac_positive).abs();
        ece += c / n * gap;
        mce = mce.max(gap);
        bins.push(CalibrationBin { count: count[b], mean_prob, frac_positive });
    }
    Ok(CalibrationReport { ece, mce, brier: brier / n, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mean_recall: f64,
}

/// Picks the threshold maximizing the mean of positive- and negative-class
/// recall. Candidates are midpoints between consecutive distinct scores; ties
/// prefer higher sensitivity, then the smaller threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice, CalibrationError> {
    check_pairs(scores, labels)?;
    check_both_classes(labels)?;
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;

    // Sweep from low to high thresholds: everything at or below the cut is negative.
    let mut best: Option<ThresholdChoice> = None;
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        if i == pairs.len() {
            break;
        }
        let threshold = (s + pairs[i].0) / 2.0;
        let sensitivity = (n_pos - pos_below as f64) / n_pos;
        let specificity = neg_below as f64 / n_neg;
        let cand =
            ThresholdChoice { threshold, sensitivity, specificity, mean_recall: (sensitivity + specificity) / 2.0 };
        best = Some(match best {
            None => cand,
            Some(b) => {
                // Candidates arrive in increasing threshold order, so strict
                // improvement is needed to move to a larger threshold.
                if cand.mean_recall > b.mean_recall
                    || (cand.mean_recall == b.mean_recall && cand.sensitivity > b.sensitivity)
                {
                    cand
                } else {
                    b
                }
            }
        });
    }
    best.ok_or(CalibrationError::NoCandidateThreshold)
}
