//! Screening-program analytics over the event log: annual rates, per-GP
//! agreement, the autonomous-workload counterfactual, false-negative
//! tallies, drift monitoring and a seeded synthetic cohort generator.

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::metrics::{positive_negative_agreement, AgreementStats, MetricsError};
use crate::par::Execution;
use crate::study::Category;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no studies in year {0}")]
    EmptyYear(i32),
    #[error("workload counterfactual needs ai_referred > 0")]
    ZeroAiReferred,
    #[error("invalid cohort config: {0}")]
    Config(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Second-level grade on the international clinical DR scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IcdrGrade {
    NoDr,
    Mild,
    Moderate,
    Severe,
    Proliferative,
    NotGradable,
}

impl IcdrGrade {
    pub fn from_level(level: u8) -> Option<Self> {
        [Self::NoDr, Self::Mild, Self::Moderate, Self::Severe, Self::Proliferative].get(level as usize).copied()
    }

    pub fn level(self) -> Option<u8> {
        match self {
            Self::NotGradable => None,
            g => Some(g as u8),
        }
    }
}

/// Serialized as 0-4, or the string `"not_gradable"`.
impl Serialize for IcdrGrade {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.level() {
            Some(l) => s.serialize_u8(l),
            None => s.serialize_str("not_gradable"),
        }
    }
}

impl<'de> Deserialize<'de> for IcdrGrade {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Level(u8),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Level(l) => {
                IcdrGrade::from_level(l).ok_or_else(|| serde::de::Error::custom(format!("ICDR level {l} out of 0-4")))
            }
            Raw::Text(t) if matches!(t.as_str(), "not_gradable" | "not-gradable" | "NG") => Ok(IcdrGrade::NotGradable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unknown ICDR grade {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AiProposalRecord {
    pub refer: bool,
    #[serde(default)]
    pub categories: Vec<Category>,
}

impl AiProposalRecord {
    /// Referral motive, DR taking precedence over non-gradability.
    pub fn motive(&self) -> Option<Category> {
        if !self.refer {
            None
        } else if self.categories.contains(&Category::ReferableDR) || !self.categories.contains(&Category::NonGradable)
        {
            Some(Category::ReferableDR)
        } else {
            Some(Category::NonGradable)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpDecision {
    pub refer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondLevel {
    pub exam_appointed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icdr_grade: Option<IcdrGrade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningEvent {
    pub study_id: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_proposal: Option<AiProposalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_decision: Option<GpDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_level: Option<SecondLevel>,
    #[serde(default)]
    pub pressure_referral: bool,
}

impl ScreeningEvent {
    fn gp_refers(&self) -> bool {
        self.gp_decision.is_some_and(|d| d.refer)
    }

    fn exam(&self) -> bool {
        self.second_level.is_some_and(|s| s.exam_appointed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualSummary {
    pub year: i32,
    pub n_studies: usize,
    pub n_ai: usize,
    pub gp_referred: usize,
    pub ai_referred: usize,
    pub ai_dr: usize,
    pub ai_nongradable: usize,
    pub exams: usize,
    pub gp_referral_rate: f64,
    /// Over all studies of the year, so pre-deployment years read zero.
    pub ai_referral_rate: f64,
    pub ai_dr_rate: f64,
    pub ai_nongradable_rate: f64,
    pub exam_rate: f64,
    pub kappa_gp_vs_ai: Option<f64>,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rates over the studies screened in `year`.
pub fn annual_summary(events: &[ScreeningEvent], year: i32) -> Result<AnnualSummary, AnalyticsError> {
    let year_events: Vec<&ScreeningEvent> = events.iter().filter(|e| e.timestamp.year() == year).collect();
    summarize_year(year, &year_events)
}

fn summarize_year(year: i32, events: &[&ScreeningEvent]) -> Result<AnnualSummary, AnalyticsError> {
    let n = events.len();
    if n == 0 {
        return Err(AnalyticsError::EmptyYear(year));
    }
    let mut s = AnnualSummary {
        year,
        n_studies: n,
        n_ai: 0,
        gp_referred: 0,
        ai_referred: 0,
        ai_dr: 0,
        ai_nongradable: 0,
        exams: 0,
        gp_referral_rate: 0.0,
        ai_referral_rate: 0.0,
        ai_dr_rate: 0.0,
        ai_nongradable_rate: 0.0,
        exam_rate: 0.0,
        kappa_gp_vs_ai: None,
    };
    let (mut ai_bits, mut gp_bits) = (Vec::new(), Vec::new());
    for e in events {
        s.gp_referred += e.gp_refers() as usize;
        s.exams += e.exam() as usize;
        if let Some(ai) = &e.ai_proposal {
            s.n_ai += 1;
            match ai.motive() {
                Some(Category::NonGradable) => s.ai_nongradable += 1,
                Some(_) => s.ai_dr += 1,
                None => {}
            }
            if let Some(gp) = e.gp_decision {
                ai_bits.push(ai.refer);
                gp_bits.push(gp.refer);
            }
        }
    }
    s.ai_referred = s.ai_dr + s.ai_nongradable;
    s.gp_referral_rate = rate(s.gp_referred, n);
    s.ai_dr_rate = rate(s.ai_dr, n);
    s.ai_nongradable_rate = rate(s.ai_nongradable, n);
    // Summed rather than divided so the two motives add up bit for bit.
    s.ai_referral_rate = s.ai_dr_rate + s.ai_nongradable_rate;
    s.exam_rate = rate(s.exams, n);
    if !ai_bits.is_empty() {
        s.kappa_gp_vs_ai = Some(positive_negative_agreement(&ai_bits, &gp_bits)?.kappa);
    }
    Ok(s)
}

/// One summary per year present in the log, in ascending year order.
pub fn annual_summaries(events: &[ScreeningEvent], exec: Execution) -> Vec<AnnualSummary> {
    let mut by_year: BTreeMap<i32, Vec<&ScreeningEvent>> = BTreeMap::new();
    for e in events {
        by_year.entry(e.timestamp.year()).or_default().push(e);
    }
    let years: Vec<(i32, Vec<&ScreeningEvent>)> = by_year.into_iter().collect();
    exec.map(&years, |(y, evs)| summarize_year(*y, evs).expect("non-empty by construction"))
}

/// Inclusive date range; open ends are unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl Period {
    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        let d = t.date_naive();
        self.from.is_none_or(|f| d >= f) && self.to.is_none_or(|to| d <= to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpRow {
    pub gp_id: String,
    pub pa: Option<f64>,
    pub na: Option<f64>,
    pub kappa: Option<f64>,
    pub n_studies: usize,
    pub referred_rate: f64,
    pub exam_rate: f64,
}

impl GpRow {
    pub const CSV_HEADER: &'static str = "gp_id,pa,na,kappa,n_studies,referred_rate,exam_rate";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.gp_id,
            opt(self.pa),
            opt(self.na),
            opt(self.kappa),
            self.n_studies,
            self.referred_rate,
            self.exam_rate
        )
    }
}

fn agreement_over(events: &[&ScreeningEvent]) -> Result<Option<AgreementStats>, AnalyticsError> {
    let (ai, gp): (Vec<bool>, Vec<bool>) =
        events.iter().filter_map(|e| Some((e.ai_proposal.as_ref()?.refer, e.gp_decision?.refer))).unzip();
    if ai.is_empty() {
        return Ok(None);
    }
    Ok(Some(positive_negative_agreement(&ai, &gp)?))
}

/// Per-GP agreement with the AI proposals, taking each GP's decisions as
/// the reference, plus referral and exam rates over that GP's studies.
pub fn gp_table(events: &[ScreeningEvent], period: Period) -> Result<Vec<GpRow>, AnalyticsError> {
    let mut by_gp: BTreeMap<&str, Vec<&ScreeningEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| period.contains(&e.timestamp)) {
        if let Some(gp) = &e.gp_id {
            by_gp.entry(gp.as_str()).or_default().push(e);
        }
    }
    by_gp
        .into_iter()
        .map(|(gp_id, evs)| {
            let agreement = agreement_over(&evs)?;
            let n = evs.len();
            Ok(GpRow {
                gp_id: gp_id.to_string(),
                pa: agreement.and_then(|a| a.pa),
                na: agreement.and_then(|a| a.na),
                kappa: agreement.map(|a| a.kappa),
                n_studies: n,
                referred_rate: rate(evs.iter().filter(|e| e.gp_refers()).count(), n),
                exam_rate: rate(evs.iter().filter(|e| e.exam()).count(), n),
            })
        })
        .collect()
}

/// Agreement pooled over every GP in the period.
pub fn global_agreement(events: &[ScreeningEvent], period: Period) -> Result<Option<AgreementStats>, AnalyticsError> {
    let evs: Vec<&ScreeningEvent> = events.iter().filter(|e| period.contains(&e.timestamp)).collect();
    agreement_over(&evs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCounterfactual {
    pub total_studies: u64,
    pub gp_referred: u64,
    pub ai_referred: u64,
    pub current_visualizations: u64,
    pub autonomous_visualizations: u64,
    pub reduction_factor: f64,
    pub referral_inflation: Option<f64>,
}

/// Study visualizations with humans reviewing every study versus the AI
/// screening autonomously and the second level seeing its referrals.
pub fn workload_counterfactual(
    total: u64,
    gp_referred: u64,
    ai_referred: u64,
) -> Result<WorkloadCounterfactual, AnalyticsError> {
    if ai_referred == 0 {
        return Err(AnalyticsError::ZeroAiReferred);
    }
    let current = total + gp_referred;
    Ok(WorkloadCounterfactual {
        total_studies: total,
        gp_referred,
        ai_referred,
        current_visualizations: current,
        autonomous_visualizations: ai_referred,
        reduction_factor: current as f64 / ai_referred as f64,
        referral_inflation: (gp_referred > 0).then(|| ai_referred as f64 / gp_referred as f64),
    })
}

/// Counterfactual over the studies that carry an AI proposal.
pub fn workload_from_events(events: &[ScreeningEvent]) -> Result<WorkloadCounterfactual, AnalyticsError> {
    let with_ai = events.iter().filter(|e| e.ai_proposal.is_some());
    let (mut total, mut gp, mut ai) = (0, 0, 0);
    for e in with_ai {
        total += 1;
        gp += e.gp_refers() as u64;
        ai += e.ai_proposal.as_ref().is_some_and(|p| p.refer) as u64;
    }
    workload_counterfactual(total, gp, ai)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalseNegativeTally {
    pub no_dr: usize,
    pub mild: usize,
    pub moderate: usize,
    pub severe: usize,
    pub proliferative: usize,
    pub not_gradable: usize,
    /// False negatives without a second-level grade.
    pub ungraded: usize,
}

impl FalseNegativeTally {
    pub fn graded(&self) -> usize {
        self.no_dr + self.mild + self.moderate + self.severe + self.proliferative + self.not_gradable
    }

    pub fn add(&mut self, grade: Option<IcdrGrade>) {
        match grade {
            None => self.ungraded += 1,
            Some(IcdrGrade::NoDr) => self.no_dr += 1,
            Some(IcdrGrade::Mild) => self.mild += 1,
            Some(IcdrGrade::Moderate) => self.moderate += 1,
            Some(IcdrGrade::Severe) => self.severe += 1,
            Some(IcdrGrade::Proliferative) => self.proliferative += 1,
            Some(IcdrGrade::NotGradable) => self.not_gradable += 1,
        }
    }
}

/// Studies the AI did not propose to refer but the GP referred, tallied by
/// second-level grade.
pub fn false_negative_breakdown(events: &[ScreeningEvent]) -> FalseNegativeTally {
    let mut tally = FalseNegativeTally::default();
    for e in events {
        let ai_no = e.ai_proposal.as_ref().is_some_and(|p| !p.refer);
        if ai_no && e.gp_refers() {
            tally.add(e.second_level.and_then(|s| s.icdr_grade));
        }
    }
    tally
}

pub const DRIFT_WINDOW: usize = 12;

/// Flags values deviating from the trailing-window mean by more than `k`
/// population standard deviations. Months with fewer than `min_history`
/// preceding values are never flagged.
pub fn drift_check(series: &[f64], k: f64, min_history: usize) -> Vec<bool> {
    (0..series.len())
        .map(|i| {
            let history = &series[i.saturating_sub(DRIFT_WINDOW)..i];
            if history.len() < min_history.max(1) {
                return false;
            }
            let n = history.len() as f64;
            let mean = history.iter().sum::<f64>() / n;
            let var = history.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (series[i] - mean).abs() > k * var.sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyRates {
    /// `YYYY-MM`.
    pub month: String,
    pub n_studies: usize,
    pub referral_rate: f64,
    pub nongradable_rate: f64,
}

/// AI referral and non-gradability rates per calendar month, over studies
/// carrying an AI proposal.
pub fn monthly_rates(events: &[ScreeningEvent]) -> Vec<MonthlyRates> {
    let mut by_month: BTreeMap<(i32, u32), (usize, usize, usize)> = BTreeMap::new();
    for e in events {
        if let Some(ai) = &e.ai_proposal {
            let m = by_month.entry((e.timestamp.year(), e.timestamp.month())).or_default();
            m.0 += 1;
            m.1 += ai.refer as usize;
            m.2 += (ai.motive() == Some(Category::NonGradable)) as usize;
        }
    }
    by_month
        .into_iter()
        .map(|((y, m), (n, r, ng))| MonthlyRates {
            month: format!("{y:04}-{m:02}"),
            n_studies: n,
            referral_rate: rate(r, n),
            nongradable_rate: rate(ng, n),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFlag {
    pub month: String,
    pub referral: bool,
    pub nongradable: bool,
}

pub fn drift_report(events: &[ScreeningEvent], k: f64, min_history: usize) -> Vec<DriftFlag> {
    let months = monthly_rates(events);
    let referral: Vec<f64> = months.iter().map(|m| m.referral_rate).collect();
    let ng: Vec<f64> = months.iter().map(|m| m.nongradable_rate).collect();
    let fr = drift_check(&referral, k, min_history);
    let fn_ = drift_check(&ng, k, min_history);
    months
        .into_iter()
        .zip(fr.into_iter().zip(fn_))
        .map(|(m, (referral, nongradable))| DriftFlag { month: m.month, referral, nongradable })
        .collect()
}

/// Exact median; the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median of the element-wise differences `a[i] - b[i]`.
pub fn median_difference(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    median(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpProfile {
    pub gp_id: String,
    /// Marginal sensitivity and specificity against latent truth.
    pub sensitivity: f64,
    pub specificity: f64,
    /// Probability of copying the AI proposal instead of judging alone.
    #[serde(default)]
    pub trust: f64,
    /// Relative share of studies assigned to this GP.
    #[serde(default = "one")]
    pub share: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_studies: usize,
    pub years: Vec<i32>,
    pub gp_profiles: Vec<GpProfile>,
    /// Probability of referable DR per study.
    pub prevalence: f64,
    /// Probability of a non-gradable study in the first year.
    #[serde(default = "default_ng_rate")]
    pub nongradable_rate: f64,
    /// Added to the non-gradable rate each subsequent year.
    #[serde(default)]
    pub quality_drift: f64,
    #[serde(default = "default_ai_sens")]
    pub ai_sensitivity: f64,
    #[serde(default = "default_ai_spec")]
    pub ai_specificity: f64,
    /// First year with AI proposals; earlier studies carry none.
    #[serde(default)]
    pub ai_from_year: Option<i32>,
    #[serde(default = "default_pressure")]
    pub pressure_referral_rate: f64,
}

fn default_ng_rate() -> f64 {
    0.05
}
fn default_ai_sens() -> f64 {
    0.95
}
fn default_ai_spec() -> f64 {
    0.85
}
fn default_pressure() -> f64 {
    0.01
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_studies: 1000,
            years: vec![2020, 2021, 2022, 2023],
            gp_profiles: vec![
                GpProfile { gp_id: "gp1".into(), sensitivity: 0.7, specificity: 0.96, trust: 0.2, share: 1.0 },
                GpProfile { gp_id: "gp2".into(), sensitivity: 0.9, specificity: 0.9, trust: 0.5, share: 1.0 },
            ],
            prevalence: 0.07,
            nongradable_rate: default_ng_rate(),
            quality_drift: 0.0,
            ai_sensitivity: default_ai_sens(),
            ai_specificity: default_ai_spec(),
            ai_from_year: None,
            pressure_referral_rate: default_pressure(),
        }
    }
}

impl CohortConfig {
    fn nongradable_rate_in(&self, year_index: usize) -> f64 {
        (self.nongradable_rate + self.quality_drift * year_index as f64).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let bad = |what: &str| Err(AnalyticsError::Config(what.to_string()));
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.years.is_empty() {
            return bad("years must not be empty");
        }
        if self.gp_profiles.is_empty() {
            return bad("at least one GP profile is required");
        }
        for (name, p) in [
            ("prevalence", self.prevalence),
            ("nongradable_rate", self.nongradable_rate),
            ("ai_sensitivity", self.ai_sensitivity),
            ("ai_specificity", self.ai_specificity),
            ("pressure_referral_rate", self.pressure_referral_rate),
        ] {
            if !unit(p) {
                return Err(AnalyticsError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !self.quality_drift.is_finite() {
            return bad("quality_drift must be finite");
        }
        for g in &self.gp_profiles {
            for (name, p) in [("sensitivity", g.sensitivity), ("specificity", g.specificity), ("trust", g.trust)] {
                if !unit(p) {
                    return Err(AnalyticsError::Config(format!("{}: {name} = {p} is not a probability", g.gp_id)));
                }
            }
            if !(g.share > 0.0 && g.share.is_finite()) {
                return Err(AnalyticsError::Config(format!("{}: share must be positive", g.gp_id)));
            }
            if g.trust > 0.0 {
                let (s, sp) = self.independent_rates(g);
                if !unit(s) || !unit(sp) {
                    return Err(AnalyticsError::Config(format!(
                        "{}: trust {} cannot keep sensitivity {} and specificity {} given the AI rates",
                        g.gp_id, g.trust, g.sensitivity, g.specificity
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rates of the GP's own judgement chosen so that mixing in copied AI
    /// proposals with probability `trust` keeps the configured marginals.
    fn independent_rates(&self, g: &GpProfile) -> (f64, f64) {
        if g.trust >= 1.0 {
            return (self.ai_sensitivity, self.ai_specificity);
        }
        let mix = |target: f64, ai: f64| (target - g.trust * ai) / (1.0 - g.trust);
        (mix(g.sensitivity, self.ai_sensitivity), mix(g.specificity, self.ai_specificity))
    }
}

/// Hidden state of a synthetic study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub referable_dr: bool,
    pub gradable: bool,
    /// Eye carrying the finding, 0 or 1.
    pub affected_eye: u8,
}

impl LatentTruth {
    pub fn referable(&self) -> bool {
        self.referable_dr || !self.gradable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub event: ScreeningEvent,
    pub truth: LatentTruth,
}

/// Deterministic synthetic event log for a screening program.
pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<Vec<CohortRecord>, AnalyticsError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_years = config.years.len();
    let per_year = config.n_studies.div_ceil(n_years).max(1);
    let total_share: f64 = config.gp_profiles.iter().map(|g| g.share).sum();
    let own: Vec<(f64, f64)> = config.gp_profiles.iter().map(|g| config.independent_rates(g)).collect();
    let mut out = Vec::with_capacity(config.n_studies);

    for i in 0..config.n_studies {
        let year_index = (i / per_year).min(n_years - 1);
        let year = config.years[year_index];
        let in_year = i - year_index * per_year;
        let start = Utc
            .with_ymd_and_hms(year, 1, 1, 8, 0, 0)
            .single()
            .ok_or_else(|| AnalyticsError::Config(format!("year {year} out of range")))?;
        let seconds_per_study = (365 * 24 * 3600 / per_year as i64).max(1);
        let timestamp = start + Duration::seconds(in_year as i64 * seconds_per_study);

        let gradable = !rng.random_bool(config.nongradable_rate_in(year_index));
        let referable_dr = rng.random_bool(config.prevalence);
        let truth = LatentTruth { referable_dr, gradable, affected_eye: rng.random_range(0..2) };
        let positive = truth.referable();

        let ai_active = config.ai_from_year.is_none_or(|y| year >= y);
        let ai_refers =
            if positive { rng.random_bool(config.ai_sensitivity) } else { !rng.random_bool(config.ai_specificity) };
        let ai_proposal = ai_active.then(|| {
            let mut categories = vec![Category::NonReferable; 2];
            if ai_refers {
                categories[truth.affected_eye as usize] =
                    if truth.gradable || truth.referable_dr { Category::ReferableDR } else { Category::NonGradable };
            }
            AiProposalRecord { refer: ai_refers, categories }
        });

        let mut pick = rng.random::<f64>() * total_share;
        let mut gp_index = config.gp_profiles.len() - 1;
        for (j, g) in config.gp_profiles.iter().enumerate() {
            if pick < g.share {
                gp_index = j;
                break;
            }
            pick -= g.share;
        }
        let profile = &config.gp_profiles[gp_index];
        let (own_sens, own_spec) = own[gp_index];
        let copies = ai_active && rng.random_bool(profile.trust);
        // With AI inactive the GP judges at the configured marginal rates.
        let (sens, spec) = if ai_active { (own_sens, own_spec) } else { (profile.sensitivity, profile.specificity) };
        let own_refers = if positive { rng.random_bool(sens) } else { !rng.random_bool(spec) };
        let gp_refers = if copies { ai_refers } else { own_refers };

        let pressure_referral = rng.random_bool(config.pressure_referral_rate);
        let second_level = (gp_refers || pressure_referral).then(|| {
            let icdr_grade = if !truth.gradable {
                IcdrGrade::NotGradable
            } else if truth.referable_dr {
                [IcdrGrade::Moderate, IcdrGrade::Moderate, IcdrGrade::Severe, IcdrGrade::Proliferative]
                    [rng.random_range(0..4)]
            } else if rng.random_bool(0.1) {
                IcdrGrade::Mild
            } else {
                IcdrGrade::NoDr
            };
            let exam_appointed = truth.referable_dr || (!truth.gradable && rng.random_bool(0.3));
            SecondLevel { exam_appointed, icdr_grade: Some(icdr_grade) }
        });

        out.push(CohortRecord {
            event: ScreeningEvent {
                study_id: format!("S{:06}", i + 1),
                timestamp,
                gp_id: Some(profile.gp_id.clone()),
                ai_proposal,
                gp_decision: Some(GpDecision { refer: gp_refers }),
                second_level,
                pressure_referral,
            },
            truth,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(y: i32, m: u32, d: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, 10, 0, 0).unwrap()
    }

    fn event(id: &str, ai: Option<(bool, Category)>, gp: Option<bool>, exam: bool) -> ScreeningEvent {
        ScreeningEvent {
            study_id: id.into(),
            timestamp: ts(2022, 3, 1),
            gp_id: Some("gp".into()),
            ai_proposal: ai.map(|(refer, c)| AiProposalRecord { refer, categories: vec![c, Category::NonReferable] }),
            gp_decision: gp.map(|refer| GpDecision { refer }),
            second_level: exam.then_some(SecondLevel { exam_appointed: true, icdr_grade: Some(IcdrGrade::Moderate) }),
            pressure_referral: false,
        }
    }

    #[test]
    fn annual_example() {
        use Category::*;
        let evs = vec![
            event("a", Some((true, ReferableDR)), Some(true), true),
            event("b", Some((true, NonGradable)), Some(false), false),
            event("c", Some((false, NonReferable)), Some(false), false),
            event("d", Some((false, NonReferable)), Some(false), false),
        ];
        let s = annual_summary(&evs, 2022).unwrap();
        assert_eq!(s.ai_referral_rate, 0.5);
        assert_eq!(s.ai_dr_rate, 0.25);
        assert_eq!(s.ai_nongradable_rate, 0.25);
        assert_eq!(s.gp_referral_rate, 0.25);
        assert_eq!(s.exam_rate, 0.25);
        assert_eq!(annual_summary(&evs, 2019), Err(AnalyticsError::EmptyYear(2019)));
    }

    #[test]
    fn annual_identical_and_pre_deployment() {
        let same = vec![
            event("a", Some((true, Category::ReferableDR)), Some(true), false),
            event("b", Some((false, Category::NonReferable)), Some(false), false),
        ];
        assert_eq!(annual_summary(&same, 2022).unwrap().kappa_gp_vs_ai, Some(1.0));
        let pre = vec![event("a", None, Some(true), true), event("b", None, Some(false), false)];
        let s = annual_summary(&pre, 2022).unwrap();
        assert_eq!(s.kappa_gp_vs_ai, None);
        assert_eq!(s.gp_referral_rate, 0.5);
    }

    #[test]
    fn gp_table_example() {
        let ai = [true, true, false, false];
        let human = [true, false, false, false];
        let exams = [true, false, false, false];
        let evs: Vec<ScreeningEvent> = (0..4)
            .map(|i| {
                let c = if ai[i] { Category::ReferableDR } else { Category::NonReferable };
                event(&i.to_string(), Some((ai[i], c)), Some(human[i]), exams[i])
            })
            .collect();
        let rows = gp_table(&evs, Period::default()).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.pa, r.na), (Some(0.5), Some(1.0)));
        assert_eq!((r.referred_rate, r.exam_rate, r.n_studies), (0.25, 0.25, 4));

        let outside = Period { from: Some(NaiveDate::from_ymd_opt(2023, 1, 1).unwrap()), to: None };
        assert!(gp_table(&evs, outside).unwrap().is_empty());
    }

    #[test]
    fn workload_examples() {
        let w = workload_counterfactual(22962, 3357, 6165).unwrap();
        assert_eq!(w.current_visualizations, 26319);
        assert!((w.reduction_factor - 4.27).abs() < 0.01);
        assert!((w.referral_inflation.unwrap() - 1.84).abs() < 0.01);
        let w = workload_counterfactual(100, 10, 10).unwrap();
        assert_eq!((w.reduction_factor, w.referral_inflation), (11.0, Some(1.0)));
        let w = workload_counterfactual(50, 5, 50).unwrap();
        assert_eq!(w.reduction_factor, 55.0 / 50.0);
        assert_eq!(workload_counterfactual(10, 1, 0), Err(AnalyticsError::ZeroAiReferred));
    }

    #[test]
    fn false_negatives() {
        let mut evs = Vec::new();
        let grades = [
            (IcdrGrade::NoDr, 150),
            (IcdrGrade::Mild, 12),
            (IcdrGrade::Moderate, 2),
            (IcdrGrade::Severe, 1),
            (IcdrGrade::Proliferative, 0),
            (IcdrGrade::NotGradable, 29),
        ];
        for (g, n) in grades {
            for _ in 0..n {
                let mut e = event("x", Some((false, Category::NonReferable)), Some(true), false);
                e.second_level = Some(SecondLevel { exam_appointed: false, icdr_grade: Some(g) });
                evs.push(e);
            }
        }
        let mut ungraded = event("u", Some((false, Category::NonReferable)), Some(true), false);
        ungraded.second_level = None;
        evs.push(ungraded);
        evs.push(event("tp", Some((true, Category::ReferableDR)), Some(true), true));
        let t = false_negative_breakdown(&evs);
        assert_eq!(
            t,
            FalseNegativeTally {
                no_dr: 150,
                mild: 12,
                moderate: 2,
                severe: 1,
                proliferative: 0,
                not_gradable: 29,
                ungraded: 1
            }
        );
        assert_eq!(false_negative_breakdown(&evs[evs.len() - 1..]), FalseNegativeTally::default());
    }

    #[test]
    fn drift_examples() {
        assert!(drift_check(&[0.2; 30], 3.0, 3).iter().all(|f| !f));
        let mut s: Vec<f64> = (0..12).map(|i| 0.15 + if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        s.push(0.35);
        let flags = drift_check(&s, 3.0, 3);
        assert!(flags[12]);
        assert!(flags[..12].iter().all(|f| !f));
        assert!(!drift_check(&[0.1, 0.9, 0.1], 3.0, 3).iter().take(2).any(|&f| f));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median_difference(&[5.0, 6.0, 9.0], &[1.0, 1.0, 1.0]), Some(5.0));
    }

    #[test]
    fn grade_serde() {
        assert_eq!(serde_json::to_string(&IcdrGrade::Moderate).unwrap(), "2");
        assert_eq!(serde_json::to_string(&IcdrGrade::NotGradable).unwrap(), "\"not_gradable\"");
        assert_eq!(serde_json::from_str::<IcdrGrade>("4").unwrap(), IcdrGrade::Proliferative);
        assert!(serde_json::from_str::<IcdrGrade>("5").is_err());
    }

    #[test]
    fn cohort_determinism_and_prevalence() {
        let cfg = CohortConfig { n_studies: 300, prevalence: 0.0, ..Default::default() };
        let a = generate_cohort(&cfg, 7).unwrap();
        assert_eq!(a, generate_cohort(&cfg, 7).unwrap());
        assert!(a.iter().all(|r| !r.truth.referable_dr));
        assert_ne!(a, generate_cohort(&cfg, 8).unwrap());
        let bad = CohortConfig { prevalence: 1.5, ..Default::default() };
        assert!(matches!(generate_cohort(&bad, 0), Err(AnalyticsError::Config(_))));
    }

    #[test]
    fn cohort_gp_sensitivity_matches_profile() {
        let cfg = CohortConfig {
            n_studies: 10_000,
            prevalence: 0.3,
            gp_profiles: vec![GpProfile {
                gp_id: "g".into(),
                sensitivity: 0.9,
                specificity: 0.95,
                trust: 0.0,
                share: 1.0,
            }],
            ..Default::default()
        };
        let rows = generate_cohort(&cfg, 42).unwrap();
        let pos: Vec<_> = rows.iter().filter(|r| r.truth.referable()).collect();
        let sens = pos.iter().filter(|r| r.event.gp_decision.unwrap().refer).count() as f64 / pos.len() as f64;
        assert!((sens - 0.9).abs() < 0.02, "sens {sens}");
    }
}
