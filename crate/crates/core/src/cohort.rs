//! Follow-up, eligibility, labelling and the stratified split.
//!
//! Follow-up ends at the date of death, or at the last creatinine result for
//! surviving patients. The prediction window is the 30 days ending there,
//! inclusive at both ends; "before the window" means strictly earlier than
//! its first day.

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PatientTimeline, Timelines};
use crate::rng;
use crate::vocab::MarkerVocabulary;

pub const WINDOW_DAYS: u64 = 30;
pub const MIN_PRE_WINDOW_DAYS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRules {
    pub window_days: u64,
    pub min_pre_window_days: usize,
}

impl Default for CohortRules {
    fn default() -> Self {
        CohortRules {
            window_days: WINDOW_DAYS,
            min_pre_window_days: MIN_PRE_WINDOW_DAYS,
        }
    }
}

/// Inclusive date range `[start, end]` with `end - start = window_days`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Window {
    pub fn ending_at(end: NaiveDate, days: u64) -> Self {
        Window {
            start: end - Days::new(days),
            end,
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn is_before(&self, date: NaiveDate) -> bool {
        date < self.start
    }

    pub fn length_days(&self) -> i64 {
        (self.end - self.start).num_days()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NoCreatinine,
    TooFewPreWindowDays,
    DeceasedNoWindowMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eligibility {
    Eligible,
    Excluded(ExclusionReason),
}

/// One patient's cohort outcome. A label is present iff no exclusion reason is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CohortRecord", into = "CohortRecord")]
pub struct CohortEntry {
    pub patient_id: String,
    pub window: Option<Window>,
    pub label: Option<u8>,
    pub split: Option<Split>,
    pub exclusion_reason: Option<ExclusionReason>,
}

impl CohortEntry {
    pub fn is_eligible(&self) -> bool {
        self.exclusion_reason.is_none()
    }
}

/// Flat `cohort.jsonl` row.
#[derive(Serialize, Deserialize)]
struct CohortRecord {
    patient_id: String,
    window_start: Option<NaiveDate>,
    window_end: Option<NaiveDate>,
    label: Option<u8>,
    split: Option<Split>,
    exclusion_reason: Option<ExclusionReason>,
}

impl From<CohortEntry> for CohortRecord {
    fn from(e: CohortEntry) -> Self {
        CohortRecord {
            patient_id: e.patient_id,
            window_start: e.window.map(|w| w.start),
            window_end: e.window.map(|w| w.end),
            label: e.label,
            split: e.split,
            exclusion_reason: e.exclusion_reason,
        }
    }
}

impl TryFrom<CohortRecord> for CohortEntry {
    type Error = String;

    fn try_from(r: CohortRecord) -> std::result::Result<Self, String> {
        let window = match (r.window_start, r.window_end) {
            (Some(start), Some(end)) if start < end => Some(Window { start, end }),
            (None, None) => None,
            _ => return Err(format!("patient `{}`: inconsistent window", r.patient_id)),
        };
        if r.label.is_some() == r.exclusion_reason.is_some() {
            return Err(format!(
                "patient `{}`: exactly one of label and exclusion_reason must be set",
                r.patient_id
            ));
        }
        if r.label.is_some_and(|l| l > 1) {
            return Err(format!("patient `{}`: label must be 0 or 1", r.patient_id));
        }
        Ok(CohortEntry {
            patient_id: r.patient_id,
            window,
            label: r.label,
            split: r.split,
            exclusion_reason: r.exclusion_reason,
        })
    }
}

fn creatinine_dates<'a>(
    timeline: &'a PatientTimeline,
    vocab: &'a MarkerVocabulary,
) -> impl Iterator<Item = NaiveDate> + 'a {
    timeline
        .marker_events(vocab.creatinine_code())
        .map(|e| e.date)
}

pub fn follow_up_end(timeline: &PatientTimeline, vocab: &MarkerVocabulary) -> Result<NaiveDate> {
    let last = creatinine_dates(timeline, vocab)
        .last()
        .ok_or_else(|| Error::NoCreatinine(timeline.patient_id().to_string()))?;
    Ok(timeline.demographics.death_date.unwrap_or(last))
}

pub fn check_eligibility(
    timeline: &PatientTimeline,
    window: &Window,
    vocab: &MarkerVocabulary,
    rules: &CohortRules,
) -> Eligibility {
    // timeline events are unique per (date, marker), so creatinine dates are distinct
    let pre_window_days = creatinine_dates(timeline, vocab)
        .filter(|&d| window.is_before(d))
        .count();
    if pre_window_days < rules.min_pre_window_days {
        return Eligibility::Excluded(ExclusionReason::TooFewPreWindowDays);
    }
    if timeline.demographics.death_date.is_some()
        && !creatinine_dates(timeline, vocab).any(|d| window.contains(d))
    {
        return Eligibility::Excluded(ExclusionReason::DeceasedNoWindowMeasurement);
    }
    Eligibility::Eligible
}

/// 1 iff any creatinine result inside the window is flagged abnormal.
pub fn label(timeline: &PatientTimeline, window: &Window, vocab: &MarkerVocabulary) -> u8 {
    let positive = timeline
        .marker_events(vocab.creatinine_code())
        .any(|e| e.abnormal && window.contains(e.date));
    u8::from(positive)
}

pub fn assess(
    timeline: &PatientTimeline,
    vocab: &MarkerVocabulary,
    rules: &CohortRules,
) -> CohortEntry {
    let patient_id = timeline.patient_id().to_string();
    let end = match follow_up_end(timeline, vocab) {
        Ok(end) => end,
        Err(_) => {
            return CohortEntry {
                patient_id,
                window: None,
                label: None,
                split: None,
                exclusion_reason: Some(ExclusionReason::NoCreatinine),
            }
        }
    };
    let window = Window::ending_at(end, rules.window_days);
    let (label, exclusion_reason) = match check_eligibility(timeline, &window, vocab, rules) {
        Eligibility::Eligible => (Some(label(timeline, &window, vocab)), None),
        Eligibility::Excluded(reason) => (None, Some(reason)),
    };
    CohortEntry {
        patient_id,
        window: Some(window),
        label,
        split: None,
        exclusion_reason,
    }
}

/// Assesses every timeline, in patient-id order. Excluded patients are kept
/// with their reason.
pub fn build_cohort(
    timelines: &Timelines,
    vocab: &MarkerVocabulary,
    rules: &CohortRules,
) -> Vec<CohortEntry> {
    timelines
        .patients
        .values()
        .map(|t| assess(t, vocab, rules))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        let sum: f64 = f.iter().sum();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Fractions(f));
        }
        Ok(())
    }
}

/// Hamilton apportionment of `n` items: floors of the exact quotas, with the
/// leftover items going to the largest fractional parts (earlier split wins ties).
pub fn largest_remainder(n: usize, fractions: &SplitFractions) -> Result<[usize; 3]> {
    fractions.validate()?;
    let quotas = fractions.as_array().map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Assigns train/validation/test within each label class.
///
/// Each class is sorted by patient id, shuffled with a seeded RNG and cut at
/// the largest-remainder counts, so the result does not depend on input order.
/// Excluded entries pass through without a split.
pub fn stratified_split(
    mut entries: Vec<CohortEntry>,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<Vec<CohortEntry>> {
    fractions.validate()?;
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in entries.iter().enumerate() {
        if let Some(label) = e.label {
            classes[usize::from(label.min(1))].push(i);
        }
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::SingleClass);
    }
    let mut rng = rng::seeded(seed);
    for members in &mut classes {
        members.sort_by(|&a, &b| entries[a].patient_id.cmp(&entries[b].patient_id));
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), fractions)?;
        let mut cursor = members.iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for &i in cursor.by_ref().take(count) {
                entries[i].split = Some(split);
            }
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{LabEvent, PatientDemographics, Sex};

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn timeline(death: Option<&str>, labs: &[(&str, &str, bool)]) -> PatientTimeline {
        let demo = PatientDemographics {
            patient_id: "P1".into(),
            sex: Sex::Male,
            birth_date: d("2010-01-01"),
            death_date: death.map(d),
        };
        let events = labs
            .iter()
            .map(|&(date, marker, abnormal)| LabEvent {
                patient_id: "P1".into(),
                date: d(date),
                marker: marker.into(),
                abnormal,
            })
            .collect();
        PatientTimeline::new(demo, events)
    }

    fn vocab() -> MarkerVocabulary {
        MarkerVocabulary::standard()
    }

    #[test]
    fn follow_up_end_alive_is_last_creatinine() {
        let t = timeline(
            None,
            &[
                ("2020-01-01", "CREA", false),
                ("2020-03-01", "CREA", false),
                ("2020-04-01", "K", false),
            ],
        );
        assert_eq!(follow_up_end(&t, &vocab()).unwrap(), d("2020-03-01"));
    }

    #[test]
    fn follow_up_end_deceased_is_death_date() {
        let t = timeline(Some("2020-06-01"), &[("2020-01-01", "CREA", false)]);
        assert_eq!(follow_up_end(&t, &vocab()).unwrap(), d("2020-06-01"));
    }

    #[test]
    fn follow_up_end_without_creatinine_errors() {
        let t = timeline(None, &[("2020-01-01", "K", false)]);
        assert!(matches!(
            follow_up_end(&t, &vocab()),
            Err(Error::NoCreatinine(_))
        ));
    }

    #[test]
    fn window_is_thirty_days_inclusive() {
        let w = Window::ending_at(d("2020-03-31"), 30);
        assert_eq!(w.start, d("2020-03-01"));
        assert_eq!(w.length_days(), 30);
        assert!(w.contains(w.start) && w.contains(w.end));
        assert!(w.is_before(d("2020-02-29")));
        assert!(!w.is_before(w.start));
    }

    #[test]
    fn three_results_on_one_day_are_not_enough() {
        let t = timeline(
            None,
            &[
                ("2020-01-01", "CREA", false),
                ("2020-01-01", "CREA", true),
                ("2020-06-01", "CREA", false),
            ],
        );
        let w = Window::ending_at(d("2020-06-01"), 30);
        assert_eq!(
            check_eligibility(&t, &w, &vocab(), &CohortRules::default()),
            Eligibility::Excluded(ExclusionReason::TooFewPreWindowDays)
        );
    }

    #[test]
    fn three_distinct_days_alive_is_eligible() {
        let t = timeline(
            None,
            &[
                ("2020-01-01", "CREA", false),
                ("2020-02-01", "CREA", false),
                ("2020-03-01", "CREA", false),
                ("2020-06-01", "CREA", false),
            ],
        );
        let w = Window::ending_at(d("2020-06-01"), 30);
        assert_eq!(
            check_eligibility(&t, &w, &vocab(), &CohortRules::default()),
            Eligibility::Eligible
        );
    }

    #[test]
    fn deceased_needs_a_window_measurement() {
        let t = timeline(
            Some("2020-12-01"),
            &[
                ("2020-01-01", "CREA", false),
                ("2020-02-01", "CREA", false),
                ("2020-03-01", "CREA", false),
            ],
        );
        let e = assess(&t, &vocab(), &CohortRules::default());
        assert_eq!(
            e.exclusion_reason,
            Some(ExclusionReason::DeceasedNoWindowMeasurement)
        );
        assert_eq!(e.label, None);
    }

    #[test]
    fn labels_from_window_creatinine_only() {
        let base = [
            ("2020-01-01", "CREA", false),
            ("2020-02-01", "CREA", true),
            ("2020-03-01", "CREA", false),
        ];
        let w = Window::ending_at(d("2020-06-01"), 30);
        let mut normal = base.to_vec();
        normal.extend([("2020-05-20", "CREA", false), ("2020-06-01", "CREA", false)]);
        assert_eq!(label(&timeline(None, &normal), &w, &vocab()), 0);

        let mut abnormal = base.to_vec();
        abnormal.extend([("2020-05-20", "CREA", false), ("2020-06-01", "CREA", true)]);
        assert_eq!(label(&timeline(None, &abnormal), &w, &vocab()), 1);

        let mut other = base.to_vec();
        other.extend([("2020-05-20", "K", true), ("2020-06-01", "CREA", false)]);
        assert_eq!(label(&timeline(None, &other), &w, &vocab()), 0);
    }

    fn entries(pos: usize, neg: usize) -> Vec<CohortEntry> {
        (0..pos + neg)
            .map(|i| CohortEntry {
                patient_id: format!("P{i:04}"),
                window: None,
                label: Some(u8::from(i < pos)),
                split: None,
                exclusion_reason: None,
            })
            .collect()
    }

    fn tally(entries: &[CohortEntry], label: u8) -> [usize; 3] {
        let mut c = [0; 3];
        for e in entries.iter().filter(|e| e.label == Some(label)) {
            c[e.split.unwrap() as usize] += 1;
        }
        c
    }

    #[test]
    fn ten_and_ten_split_seven_one_two() {
        let out = stratified_split(entries(10, 10), &SplitFractions::default(), 1).unwrap();
        assert_eq!(tally(&out, 1), [7, 1, 2]);
        assert_eq!(tally(&out, 0), [7, 1, 2]);
    }

    #[test]
    fn single_class_cannot_be_stratified() {
        assert!(matches!(
            stratified_split(entries(5, 0), &SplitFractions::default(), 1),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let f = SplitFractions {
            train: 0.7,
            validation: 0.2,
            test: 0.2,
        };
        assert!(matches!(
            stratified_split(entries(5, 5), &f, 1),
            Err(Error::Fractions(_))
        ));
    }

    #[test]
    fn split_ignores_input_order() {
        let a = stratified_split(entries(30, 25), &SplitFractions::default(), 9).unwrap();
        let mut shuffled = entries(30, 25);
        shuffled.reverse();
        let mut b = stratified_split(shuffled, &SplitFractions::default(), 9).unwrap();
        b.sort_by(|x, y| x.patient_id.cmp(&y.patient_id));
        assert_eq!(a, b);
    }

    #[test]
    fn cohort_record_round_trip() {
        let e = CohortEntry {
            patient_id: "P1".into(),
            window: Some(Window::ending_at(d("2020-06-01"), 30)),
            label: Some(1),
            split: Some(Split::Test),
            exclusion_reason: None,
        };
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"window_start\":\"2020-05-02\""));
        assert_eq!(serde_json::from_str::<CohortEntry>(&s).unwrap(), e);
    }
}
