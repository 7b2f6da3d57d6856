//! In-memory indices derived from the event log by pure replay.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use drscreen::analytics::{AiProposalRecord, GpDecision, ScreeningEvent};
use drscreen::{Category, Laterality};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{DecisionRecorded, EventBody, ProposalComputed, StoreEvent, StudyRegistered};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("event {sequence} is not after {last}")]
    Sequence { sequence: u64, last: u64 },
    #[error("study {0} registered twice")]
    DuplicateRegistration(String),
    #[error("event for unregistered study {0}")]
    UnknownStudy(String),
    #[error("second proposal for study {0}")]
    DuplicateProposal(String),
    #[error("second decision for study {0}")]
    DuplicateDecision(String),
    #[error("decision for study {0} precedes its proposal")]
    DecisionBeforeProposal(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub registered_seq: u64,
    pub registration: StudyRegistered,
    pub proposal: Option<ProposalComputed>,
    pub decision: Option<DecisionRecorded>,
}

impl StudyRecord {
    pub fn status(&self) -> Status {
        if self.decision.is_some() {
            Status::Decided
        } else {
            Status::Pending
        }
    }

    /// Highest referral score over the eyes.
    pub fn referral_score(&self) -> Option<f64> {
        let p = &self.proposal.as_ref()?.proposal;
        p.eyes.iter().map(|e| e.referral_score).max_by(f64::total_cmp)
    }

    /// Category of the eye with the highest referral score; ties go to the
    /// category listed first in the worklist order.
    pub fn summary_category(&self) -> Option<Category> {
        let p = &self.proposal.as_ref()?.proposal;
        p.eyes
            .iter()
            .max_by(|a, b| {
                a.referral_score
                    .total_cmp(&b.referral_score)
                    .then_with(|| category_rank(b.category).cmp(&category_rank(a.category)))
            })
            .map(|e| e.category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Decided,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortMode {
    #[default]
    Referability,
    Category,
}

/// Worklist position of a study category.
pub fn category_rank(c: Category) -> u8 {
    match c {
        Category::NonGradable => 0,
        Category::ReferableDR => 1,
        Category::NonReferable => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeCategory {
    pub laterality: Laterality,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionView {
    pub gp_id: String,
    pub refer: bool,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorklistEntry {
    pub study_id: String,
    pub received_at: DateTime<Utc>,
    pub referral_score: Option<f64>,
    pub category: Option<Category>,
    pub eyes: Vec<EyeCategory>,
    pub refer: Option<bool>,
    pub status: Status,
    pub gp_decision: Option<DecisionView>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct State {
    studies: BTreeMap<String, StudyRecord>,
    last_sequence: u64,
}

impl State {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a StoreEvent>) -> Result<State, StateError> {
        let mut s = State::default();
        for e in events {
            s.apply(e)?;
        }
        Ok(s)
    }

    /// Applies one event, rejecting transitions the service never writes.
    pub fn apply(&mut self, event: &StoreEvent) -> Result<(), StateError> {
        if event.sequence_number <= self.last_sequence {
            return Err(StateError::Sequence { sequence: event.sequence_number, last: self.last_sequence });
        }
        let id = event.body.study_id().to_string();
        match &event.body {
            EventBody::StudyRegistered(r) => {
                if self.studies.contains_key(&id) {
                    return Err(StateError::DuplicateRegistration(id));
                }
                self.studies.insert(
                    id,
                    StudyRecord {
                        registered_seq: event.sequence_number,
                        registration: r.clone(),
                        proposal: None,
                        decision: None,
                    },
                );
            }
            EventBody::ProposalComputed(p) => {
                let rec = self.studies.get_mut(&id).ok_or_else(|| StateError::UnknownStudy(id.clone()))?;
                if rec.proposal.is_some() {
                    return Err(StateError::DuplicateProposal(id));
                }
                rec.proposal = Some(p.clone());
            }
            EventBody::DecisionRecorded(d) => {
                let rec = self.studies.get_mut(&id).ok_or_else(|| StateError::UnknownStudy(id.clone()))?;
                if rec.proposal.is_none() {
                    return Err(StateError::DecisionBeforeProposal(id));
                }
                if rec.decision.is_some() {
                    return Err(StateError::DuplicateDecision(id));
                }
                rec.decision = Some(d.clone());
            }
        }
        self.last_sequence = event.sequence_number;
        Ok(())
    }

    pub fn last_sequence(&self) -> u64 {
        self.last_sequence
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn get(&self, study_id: &str) -> Option<&StudyRecord> {
        self.studies.get(study_id)
    }

    /// Studies in registration order.
    pub fn studies(&self) -> Vec<&StudyRecord> {
        let mut v: Vec<&StudyRecord> = self.studies.values().collect();
        v.sort_by_key(|r| r.registered_seq);
        v
    }

    pub fn worklist(&self, sort: SortMode, status: Option<Status>) -> Vec<WorklistEntry> {
        let mut recs: Vec<&StudyRecord> =
            self.studies.values().filter(|r| status.is_none_or(|s| r.status() == s)).collect();
        let score_desc = |a: &StudyRecord, b: &StudyRecord| match (a.referral_score(), b.referral_score()) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        let arrival = |a: &StudyRecord, b: &StudyRecord| {
            a.registration.received_at.cmp(&b.registration.received_at).then(a.registered_seq.cmp(&b.registered_seq))
        };
        match sort {
            SortMode::Referability => recs.sort_by(|a, b| score_desc(a, b).then_with(|| arrival(a, b))),
            SortMode::Category => recs.sort_by(|a, b| {
                let rank = |r: &StudyRecord| r.summary_category().map_or(3, category_rank);
                rank(a).cmp(&rank(b)).then_with(|| score_desc(a, b)).then_with(|| arrival(a, b))
            }),
        }
        recs.into_iter().map(entry).collect()
    }

    /// The log as analytics records, in registration order.
    pub fn screening_events(&self) -> Vec<ScreeningEvent> {
        self.studies().into_iter().map(screening_event).collect()
    }
}

fn entry(r: &StudyRecord) -> WorklistEntry {
    let proposal = r.proposal.as_ref().map(|p| &p.proposal);
    WorklistEntry {
        study_id: r.registration.study_id.clone(),
        received_at: r.registration.received_at,
        referral_score: r.referral_score(),
        category: r.summary_category(),
        eyes: proposal
            .map(|p| p.eyes.iter().map(|e| EyeCategory { laterality: e.laterality, category: e.category }).collect())
            .unwrap_or_default(),
        refer: proposal.map(|p| p.refer),
        status: r.status(),
        gp_decision: r.decision.as_ref().map(|d| DecisionView {
            gp_id: d.gp_id.clone(),
            refer: d.refer,
            decided_at: d.decided_at,
        }),
    }
}

fn screening_event(r: &StudyRecord) -> ScreeningEvent {
    let reg = &r.registration;
    ScreeningEvent {
        study_id: reg.study_id.clone(),
        timestamp: reg.received_at,
        gp_id: r.decision.as_ref().map(|d| d.gp_id.clone()).or_else(|| reg.gp_id.clone()),
        ai_proposal: r.proposal.as_ref().map(|p| AiProposalRecord {
            refer: p.proposal.refer,
            categories: p.proposal.eyes.iter().map(|e| e.category).collect(),
        }),
        gp_decision: r.decision.as_ref().map(|d| GpDecision { refer: d.refer }),
        second_level: r.decision.as_ref().and_then(|d| d.second_level),
        pressure_referral: reg.pressure_referral,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drscreen::{EyeProposal, StudyProposal};

    fn t(s: u32) -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000 + s as i64, 0).unwrap()
    }

    fn reg(seq: u64, id: &str, at: u32) -> StoreEvent {
        StoreEvent {
            sequence_number: seq,
            body: EventBody::StudyRegistered(StudyRegistered {
                study_id: id.into(),
                received_at: t(at),
                content_hash: id.into(),
                gp_id: Some("gp".into()),
                pressure_referral: false,
                eyes: vec![],
            }),
        }
    }

    fn eye(cat: Category, score: f64) -> EyeProposal {
        EyeProposal {
            laterality: Laterality::Left,
            category: cat,
            referral_score: score,
            dr_score_transformed: score,
            non_gradability_score_transformed: 0.0,
            selected_central: None,
            selected_nasal: None,
            annotations: vec![],
            annotated_image: None,
        }
    }

    fn prop(seq: u64, id: &str, eyes: Vec<EyeProposal>) -> StoreEvent {
        let refer = eyes.iter().any(|e| e.referral_score >= 0.5);
        StoreEvent {
            sequence_number: seq,
            body: EventBody::ProposalComputed(ProposalComputed {
                study_id: id.into(),
                computed_at: t(1000),
                backend: "test".into(),
                proposal: StudyProposal { study_id: id.into(), refer, eyes },
                enhanced: Default::default(),
                geometry: Default::default(),
            }),
        }
    }

    fn decide(seq: u64, id: &str) -> StoreEvent {
        StoreEvent {
            sequence_number: seq,
            body: EventBody::DecisionRecorded(DecisionRecorded {
                study_id: id.into(),
                decided_at: t(2000),
                gp_id: "gp".into(),
                refer: true,
                note: None,
                second_level: None,
            }),
        }
    }

    fn ids(w: &[WorklistEntry]) -> Vec<&str> {
        w.iter().map(|e| e.study_id.as_str()).collect()
    }

    #[test]
    fn referability_sort_descends_by_score() {
        let evs = vec![
            reg(1, "a", 0),
            reg(2, "b", 1),
            reg(3, "c", 2),
            prop(4, "a", vec![eye(Category::ReferableDR, 0.9)]),
            prop(5, "b", vec![eye(Category::NonReferable, 0.3)]),
            prop(6, "c", vec![eye(Category::ReferableDR, 0.7)]),
        ];
        let s = State::replay(&evs).unwrap();
        assert_eq!(ids(&s.worklist(SortMode::Referability, None)), ["a", "c", "b"]);
    }

    #[test]
    fn equal_scores_earlier_first_and_unscored_last() {
        let evs = vec![
            reg(1, "late", 50),
            reg(2, "early", 10),
            reg(3, "none", 0),
            prop(4, "late", vec![eye(Category::ReferableDR, 0.6)]),
            prop(5, "early", vec![eye(Category::ReferableDR, 0.6)]),
        ];
        let s = State::replay(&evs).unwrap();
        assert_eq!(ids(&s.worklist(SortMode::Referability, None)), ["early", "late", "none"]);
    }

    #[test]
    fn category_sort_groups_non_gradable_first() {
        let evs = vec![
            reg(1, "nr", 0),
            reg(2, "dr", 1),
            reg(3, "ng", 2),
            reg(4, "ng2", 3),
            prop(5, "nr", vec![eye(Category::NonReferable, 0.2)]),
            prop(6, "dr", vec![eye(Category::ReferableDR, 0.95)]),
            prop(7, "ng", vec![eye(Category::NonGradable, 0.6)]),
            prop(8, "ng2", vec![eye(Category::NonGradable, 0.8), eye(Category::NonReferable, 0.1)]),
        ];
        let s = State::replay(&evs).unwrap();
        assert_eq!(ids(&s.worklist(SortMode::Category, None)), ["ng2", "ng", "dr", "nr"]);
    }

    #[test]
    fn status_filter_and_transitions() {
        let evs =
            vec![reg(1, "a", 0), reg(2, "b", 1), prop(3, "a", vec![eye(Category::ReferableDR, 0.9)]), decide(4, "a")];
        let s = State::replay(&evs).unwrap();
        assert_eq!(ids(&s.worklist(SortMode::Referability, Some(Status::Decided))), ["a"]);
        assert_eq!(ids(&s.worklist(SortMode::Referability, Some(Status::Pending))), ["b"]);
        let events = s.screening_events();
        assert_eq!(events[0].gp_decision, Some(GpDecision { refer: true }));
        assert!(events[1].ai_proposal.is_none());
    }

    #[test]
    fn illegal_transitions_are_rejected() {
        let mut s = State::replay(&[reg(1, "a", 0)]).unwrap();
        assert_eq!(s.apply(&decide(2, "a")), Err(StateError::DecisionBeforeProposal("a".into())));
        assert_eq!(s.apply(&decide(2, "zz")), Err(StateError::UnknownStudy("zz".into())));
        assert_eq!(s.apply(&reg(2, "a", 0)), Err(StateError::DuplicateRegistration("a".into())));
        assert!(matches!(s.apply(&reg(1, "b", 0)), Err(StateError::Sequence { .. })));
        s.apply(&prop(2, "a", vec![eye(Category::NonReferable, 0.1)])).unwrap();
        assert_eq!(s.apply(&prop(3, "a", vec![])), Err(StateError::DuplicateProposal("a".into())));
        s.apply(&decide(3, "a")).unwrap();
        assert_eq!(s.apply(&decide(4, "a")), Err(StateError::DuplicateDecision("a".into())));
    }
}
