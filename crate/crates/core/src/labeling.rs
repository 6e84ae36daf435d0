//! Binary labels for scan sessions from the subject's clinical timeline, and
//! detection lead times.
//!
//! A session is matched to the clinical visit nearest in days (ties go to the
//! earlier visit). Class 1 means the matched diagnosis is cognitively normal
//! while an AD dementia diagnosis follows strictly after the scan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_io::{ClinicalVisit, Diagnosis, ScanSession, SubjectRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelingScheme {
    /// Scans already matched to AD dementia are dropped.
    #[serde(rename = "A", alias = "a")]
    ExcludeDevelopedAd,
    /// Scans already matched to AD dementia join class 0.
    #[serde(rename = "B", alias = "b")]
    IncludeDevelopedAd,
}

impl std::str::FromStr for LabelingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::ExcludeDevelopedAd),
            "B" | "b" => Ok(Self::IncludeDevelopedAd),
            _ => Err(Error::Config(format!(
                "unknown labeling scheme {s:?} (expected A or B)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class0,
    Class1,
    Excluded,
}

impl Label {
    /// 0/1 class index, `None` when excluded.
    pub fn class(self) -> Option<u8> {
        match self {
            Label::Class0 => Some(0),
            Label::Class1 => Some(1),
            Label::Excluded => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelReason {
    PreclinicalConversion,
    HealthyNoConversion,
    NonAdDementia,
    DevelopedAdExcluded,
    DevelopedAdClass0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDecision {
    pub session: ScanSession,
    pub label: Label,
    pub matched_visit: ClinicalVisit,
    pub reason: LabelReason,
}

pub fn match_closest_visit(session_day: u32, visits: &[ClinicalVisit]) -> Result<&ClinicalVisit> {
    // min_by_key keeps the first minimum; iterating in day order makes that the earlier visit.
    let mut sorted: Vec<&ClinicalVisit> = visits.iter().collect();
    sorted.sort_by_key(|v| v.day);
    sorted
        .into_iter()
        .min_by_key(|v| v.day.abs_diff(session_day))
        .ok_or(Error::NoVisit)
}

fn check_membership(subject: &SubjectRecord, session: &ScanSession) -> Result<()> {
    if session.subject_id != subject.subject_id {
        return Err(Error::Validation(format!(
            "session of subject {} labeled against subject {}",
            session.subject_id, subject.subject_id
        )));
    }
    Ok(())
}

fn first_after(subject: &SubjectRecord, day: u32, diagnosis: Diagnosis) -> Option<u32> {
    subject
        .visits
        .iter()
        .filter(|v| v.day > day && v.diagnosis == diagnosis)
        .map(|v| v.day)
        .min()
}

pub fn assign_label(subject: &SubjectRecord, session: &ScanSession, scheme: LabelingScheme) -> Result<LabelDecision> {
    check_membership(subject, session)?;
    let matched = match_closest_visit(session.day, &subject.visits)?.clone();
    let (label, reason) = match matched.diagnosis {
        Diagnosis::CognitivelyNormal => {
            if first_after(subject, session.day, Diagnosis::AdDementia).is_some() {
                (Label::Class1, LabelReason::PreclinicalConversion)
            } else {
                (Label::Class0, LabelReason::HealthyNoConversion)
            }
        }
        Diagnosis::NonAdDementia | Diagnosis::UncertainDementia | Diagnosis::Other => {
            (Label::Class0, LabelReason::NonAdDementia)
        }
        Diagnosis::AdDementia => match scheme {
            LabelingScheme::ExcludeDevelopedAd => (Label::Excluded, LabelReason::DevelopedAdExcluded),
            LabelingScheme::IncludeDevelopedAd => (Label::Class0, LabelReason::DevelopedAdClass0),
        },
    };
    Ok(LabelDecision {
        session: session.clone(),
        label,
        matched_visit: matched,
        reason,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeadTime {
    pub to_first_uncertain: Option<u32>,
    pub to_first_ad: Option<u32>,
}

pub fn lead_time_days(subject: &SubjectRecord, session: &ScanSession) -> Result<LeadTime> {
    check_membership(subject, session)?;
    let day = session.day;
    Ok(LeadTime {
        to_first_uncertain: first_after(subject, day, Diagnosis::UncertainDementia).map(|d| d - day),
        to_first_ad: first_after(subject, day, Diagnosis::AdDementia).map(|d| d - day),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub class0_count: usize,
    pub class1_count: usize,
    pub excluded_count: usize,
}

/// Label every session of every subject, in manifest order.
pub fn label_cohort(subjects: &[SubjectRecord], scheme: LabelingScheme) -> Result<(Vec<LabelDecision>, LabelSummary)> {
    let mut out = Vec::new();
    let mut summary = LabelSummary::default();
    for s in subjects {
        for session in &s.sessions {
            let d = assign_label(s, session, scheme)?;
            match d.label {
                Label::Class0 => summary.class0_count += 1,
                Label::Class1 => summary.class1_count += 1,
                Label::Excluded => summary.excluded_count += 1,
            }
            out.push(d);
        }
    }
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visit(id: &str, day: u32, diagnosis: Diagnosis) -> ClinicalVisit {
        ClinicalVisit {
            subject_id: id.into(),
            day,
            diagnosis,
        }
    }

    fn session(id: &str, day: u32) -> ScanSession {
        ScanSession {
            subject_id: id.into(),
            day,
            volume_path: format!("{id}_{day}"),
            plane: Default::default(),
        }
    }

    fn subject(id: &str, visits: &[(u32, Diagnosis)], scans: &[u32]) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            visits: visits.iter().map(|&(d, dx)| visit(id, d, dx)).collect(),
            sessions: scans.iter().map(|&d| session(id, d)).collect(),
        }
    }

    use Diagnosis::*;

    fn patient_30205() -> SubjectRecord {
        subject(
            "30205",
            &[
                (0, CognitivelyNormal),
                (406, CognitivelyNormal),
                (773, CognitivelyNormal),
                (1125, UncertainDementia),
                (1460, UncertainDementia),
                (1837, AdDementia),
            ],
            &[61],
        )
    }

    #[test]
    fn closest_visit_table2() {
        let s = patient_30205();
        assert_eq!(match_closest_visit(61, &s.visits).unwrap().day, 0);
        assert_eq!(match_closest_visit(773, &s.visits).unwrap().day, 773);
    }

    #[test]
    fn closest_visit_tie_goes_earlier() {
        let s = subject("x", &[(406, Other), (0, CognitivelyNormal)], &[]);
        assert_eq!(match_closest_visit(203, &s.visits).unwrap().day, 0);
    }

    #[test]
    fn closest_visit_empty() {
        assert!(matches!(match_closest_visit(3, &[]), Err(Error::NoVisit)));
    }

    #[test]
    fn preclinical_30205() {
        let s = patient_30205();
        let d = assign_label(&s, &s.sessions[0], LabelingScheme::ExcludeDevelopedAd).unwrap();
        assert_eq!(d.label, Label::Class1);
        assert_eq!(d.reason, LabelReason::PreclinicalConversion);
        assert_eq!(d.matched_visit.day, 0);
    }

    #[test]
    fn all_normal_is_class0() {
        let s = subject("h", &[(0, CognitivelyNormal), (400, CognitivelyNormal)], &[390]);
        let d = assign_label(&s, &s.sessions[0], LabelingScheme::ExcludeDevelopedAd).unwrap();
        assert_eq!(d.label, Label::Class0);
        assert_eq!(d.reason, LabelReason::HealthyNoConversion);
    }

    #[test]
    fn developed_ad_depends_on_scheme() {
        let s = subject("d", &[(0, CognitivelyNormal), (500, AdDementia)], &[480]);
        let a = assign_label(&s, &s.sessions[0], LabelingScheme::ExcludeDevelopedAd).unwrap();
        let b = assign_label(&s, &s.sessions[0], LabelingScheme::IncludeDevelopedAd).unwrap();
        assert_eq!(a.label, Label::Excluded);
        assert_eq!(a.reason, LabelReason::DevelopedAdExcluded);
        assert_eq!(b.label, Label::Class0);
        assert_eq!(b.reason, LabelReason::DevelopedAdClass0);
    }

    #[test]
    fn uncertain_match_is_class0_even_if_ad_follows() {
        let s = patient_30205();
        let late = session("30205", 1200);
        let d = assign_label(&s, &late, LabelingScheme::ExcludeDevelopedAd).unwrap();
        assert_eq!(d.label, Label::Class0);
        assert_eq!(d.reason, LabelReason::NonAdDementia);
    }

    #[test]
    fn foreign_session_rejected() {
        let s = patient_30205();
        let other = session("99", 10);
        assert!(matches!(
            assign_label(&s, &other, LabelingScheme::ExcludeDevelopedAd),
            Err(Error::Validation(_))
        ));
        assert!(lead_time_days(&s, &other).is_err());
    }

    #[test]
    fn lead_times_from_tables() {
        let s = patient_30205();
        let lt = lead_time_days(&s, &s.sessions[0]).unwrap();
        assert_eq!(lt.to_first_uncertain, Some(1064));
        assert_eq!(lt.to_first_ad, Some(1776));

        let mut visits = vec![
            (0, CognitivelyNormal),
            (359, CognitivelyNormal),
            (751, CognitivelyNormal),
            (1106, CognitivelyNormal),
            (1547, CognitivelyNormal),
            (1915, CognitivelyNormal),
            (2247, CognitivelyNormal),
            (2608, CognitivelyNormal),
        ];
        visits.push((2933, AdDementia));
        let s = subject("30025", &visits, &[210, 2298]);
        let lt = lead_time_days(&s, &s.sessions[0]).unwrap();
        assert_eq!(lt.to_first_ad, Some(2723));
        assert_eq!(lt.to_first_uncertain, None);
    }

    #[test]
    fn no_future_ad_gives_none() {
        let s = subject("h", &[(0, CognitivelyNormal)], &[10]);
        let lt = lead_time_days(&s, &s.sessions[0]).unwrap();
        assert_eq!(
            lt,
            LeadTime {
                to_first_uncertain: None,
                to_first_ad: None
            }
        );
    }

    #[test]
    fn scheme_parses() {
        assert_eq!(
            "A".parse::<LabelingScheme>().unwrap(),
            LabelingScheme::ExcludeDevelopedAd
        );
        assert_eq!(
            "b".parse::<LabelingScheme>().unwrap(),
            LabelingScheme::IncludeDevelopedAd
        );
        assert!("C".parse::<LabelingScheme>().is_err());
    }
}
