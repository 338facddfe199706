//! Fixed-shape model inputs.
//!
//! Each eligible patient becomes a `max_len × 2·markers` binary matrix whose
//! rows are the distinct pre-window creatinine dates. A row holds, for every
//! marker, whether it was measured that calendar day and whether any result
//! was flagged abnormal. Long histories keep the most recent `max_len` dates;
//! short ones are left-padded with zero rows.

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortEntry, Split, Window, MIN_PRE_WINDOW_DAYS};
use crate::error::{Error, Result};
use crate::ingest::{PatientTimeline, Sex, Timelines};
use crate::vocab::MarkerVocabulary;

pub const MAX_SEQUENCE_LEN: usize = 100;
pub const AGE_SCALE_YEARS: f64 = 18.0;
pub const DAYS_PER_YEAR: f64 = 365.25;
pub const STATIC_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub patient_id: String,
    pub split: Split,
    pub label: u8,
    pub valid_length: usize,
    /// `[age at window start / 18 years, sex (female 0, male 1)]`
    pub statics: [f64; STATIC_FEATURES],
    /// Row-major 0/1 matrix; the first `steps() - valid_length` rows are padding.
    pub matrix: Vec<Vec<u8>>,
}

impl EncodedSequence {
    pub fn steps(&self) -> usize {
        self.matrix.len()
    }

    pub fn width(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    /// Flattened row-major copy as `f64`, the layout the GRU consumes.
    pub fn input(&self) -> Vec<f64> {
        self.matrix
            .iter()
            .flat_map(|row| row.iter().map(|&v| f64::from(v)))
            .collect()
    }

    pub fn valid_rows(&self) -> &[Vec<u8>] {
        &self.matrix[self.steps() - self.valid_length..]
    }

    pub fn last_row(&self) -> &[u8] {
        self.matrix.last().map_or(&[], Vec::as_slice)
    }
}

/// Everything needed to reproduce the column layout and static scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingManifest {
    pub vocabulary: MarkerVocabulary,
    pub vocabulary_hash: String,
    pub feature_columns: Vec<String>,
    pub max_len: usize,
    pub age_anchor: String,
    pub age_scale_years: f64,
    pub days_per_year: f64,
    pub sex_encoding: [(Sex, u8); 2],
    pub truncation: String,
    pub padding: String,
}

impl EncodingManifest {
    pub fn new(vocabulary: &MarkerVocabulary, max_len: usize) -> Self {
        EncodingManifest {
            vocabulary_hash: vocabulary.hash(),
            feature_columns: vocabulary.column_names(),
            vocabulary: vocabulary.clone(),
            max_len,
            age_anchor: "window_start".into(),
            age_scale_years: AGE_SCALE_YEARS,
            days_per_year: DAYS_PER_YEAR,
            sex_encoding: [(Sex::Female, 0), (Sex::Male, 1)],
            truncation: "keep_most_recent".into(),
            padding: "left_zero".into(),
        }
    }
}

/// Distinct creatinine dates strictly before the window, ascending.
pub fn event_dates(
    timeline: &PatientTimeline,
    window: &Window,
    vocab: &MarkerVocabulary,
) -> Result<Vec<NaiveDate>> {
    let mut dates: Vec<NaiveDate> = timeline
        .marker_events(vocab.creatinine_code())
        .map(|e| e.date)
        .filter(|&d| window.is_before(d))
        .collect();
    dates.dedup();
    if dates.len() < MIN_PRE_WINDOW_DAYS {
        return Err(Error::TooFewEvents {
            patient_id: timeline.patient_id().to_string(),
            found: dates.len(),
            required: MIN_PRE_WINDOW_DAYS,
        });
    }
    Ok(dates)
}

pub fn features_at(
    timeline: &PatientTimeline,
    date: NaiveDate,
    vocab: &MarkerVocabulary,
) -> Vec<u8> {
    let mut row = vec![0u8; vocab.feature_width()];
    for ev in timeline.events_on(date) {
        if let Some(m) = vocab.index_of(&ev.marker) {
            row[2 * m] = 1;
            row[2 * m + 1] |= u8::from(ev.abnormal);
        }
    }
    row
}

pub fn age_years(birth: NaiveDate, at: NaiveDate) -> f64 {
    (at - birth).num_days() as f64 / DAYS_PER_YEAR
}

pub fn statics(timeline: &PatientTimeline, window: &Window) -> [f64; STATIC_FEATURES] {
    let demo = &timeline.demographics;
    let sex = match demo.sex {
        Sex::Female => 0.0,
        Sex::Male => 1.0,
    };
    [
        age_years(demo.birth_date, window.start) / AGE_SCALE_YEARS,
        sex,
    ]
}

/// Encodes one labelled, split-assigned cohort entry.
pub fn encode_sequence(
    timeline: &PatientTimeline,
    entry: &CohortEntry,
    vocab: &MarkerVocabulary,
    max_len: usize,
) -> Result<EncodedSequence> {
    let pid = &entry.patient_id;
    let (Some(window), Some(label), Some(split)) = (entry.window, entry.label, entry.split) else {
        return Err(Error::Config(format!(
            "patient `{pid}` is not an eligible, split-assigned cohort entry"
        )));
    };
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let dates = event_dates(timeline, &window, vocab)?;
    let kept = &dates[dates.len().saturating_sub(max_len)..];
    let mut matrix = vec![vec![0u8; vocab.feature_width()]; max_len - kept.len()];
    matrix.extend(kept.iter().map(|&d| features_at(timeline, d, vocab)));
    Ok(EncodedSequence {
        patient_id: pid.clone(),
        split,
        label,
        valid_length: kept.len(),
        statics: statics(timeline, &window),
        matrix,
    })
}

/// Encodes every eligible entry, ordered by patient id.
pub fn encode_cohort(
    timelines: &Timelines,
    cohort: &[CohortEntry],
    vocab: &MarkerVocabulary,
    max_len: usize,
) -> Result<Vec<EncodedSequence>> {
    let mut eligible: Vec<&CohortEntry> = cohort.iter().filter(|e| e.is_eligible()).collect();
    eligible.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    eligible
        .par_iter()
        .map(|entry| {
            let timeline = timelines
                .get(&entry.patient_id)
                .ok_or_else(|| Error::UnknownPatient(entry.patient_id.clone()))?;
            encode_sequence(timeline, entry, vocab, max_len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{LabEvent, PatientDemographics};
    use chrono::Days;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn timeline(labs: &[(NaiveDate, &str, bool)]) -> PatientTimeline {
        let demo = PatientDemographics {
            patient_id: "P1".into(),
            sex: Sex::Male,
            birth_date: d("2011-01-01"),
            death_date: None,
        };
        let events = labs
            .iter()
            .map(|&(date, marker, abnormal)| LabEvent {
                patient_id: "P1".into(),
                date,
                marker: marker.into(),
                abnormal,
            })
            .collect();
        PatientTimeline::new(demo, events)
    }

    fn entry(window: Window) -> CohortEntry {
        CohortEntry {
            patient_id: "P1".into(),
            window: Some(window),
            label: Some(1),
            split: Some(Split::Train),
            exclusion_reason: None,
        }
    }

    #[test]
    fn event_dates_are_distinct_and_pre_window() {
        let t = timeline(&[
            (d("2020-01-01"), "CREA", false),
            (d("2020-01-01"), "K", false),
            (d("2020-02-01"), "CREA", true),
            (d("2020-03-01"), "CREA", false),
            (d("2020-05-20"), "CREA", false),
            (d("2020-06-01"), "CREA", false),
        ]);
        let w = Window::ending_at(d("2020-06-01"), 30);
        assert_eq!(
            event_dates(&t, &w, &MarkerVocabulary::standard()).unwrap(),
            vec![d("2020-01-01"), d("2020-02-01"), d("2020-03-01")]
        );
    }

    #[test]
    fn features_follow_column_layout() {
        let vocab = MarkerVocabulary::standard();
        let t = timeline(&[(d("2020-01-01"), "CREA", false)]);
        let row = features_at(&t, d("2020-01-01"), &vocab);
        assert_eq!(&row[..2], &[1, 0]);
        assert!(row[2..].iter().all(|&v| v == 0));

        let t = timeline(&[
            (d("2020-01-01"), "CREA", true),
            (d("2020-01-01"), "K", false),
        ]);
        let row = features_at(&t, d("2020-01-01"), &vocab);
        let k = vocab.index_of("K").unwrap();
        assert_eq!(&row[..2], &[1, 1]);
        assert_eq!(&row[2 * k..2 * k + 2], &[1, 0]);

        assert!(features_at(&t, d("2021-01-01"), &vocab)
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn short_history_is_left_padded() {
        let vocab = MarkerVocabulary::standard();
        let t = timeline(&[
            (d("2020-01-01"), "CREA", false),
            (d("2020-02-01"), "CREA", false),
            (d("2020-03-01"), "CREA", true),
            (d("2020-06-01"), "CREA", false),
        ]);
        let w = Window::ending_at(d("2020-06-01"), 30);
        let enc = encode_sequence(&t, &entry(w), &vocab, MAX_SEQUENCE_LEN).unwrap();
        assert_eq!(enc.valid_length, 3);
        assert_eq!(enc.steps(), 100);
        assert!(enc.matrix[..97].iter().all(|r| r.iter().all(|&v| v == 0)));
        assert_eq!(&enc.matrix[99][..2], &[1, 1]);
        assert_eq!(enc.statics[1], 1.0);
        let expected_age = (w.start - d("2011-01-01")).num_days() as f64 / 365.25 / 18.0;
        assert_eq!(enc.statics[0], expected_age);
    }

    #[test]
    fn long_history_keeps_most_recent() {
        let vocab = MarkerVocabulary::standard();
        let start = d("2015-01-01");
        // dates 1..=150, abnormal flag on date k iff k % 7 == 0
        let labs: Vec<_> = (1..=150u64)
            .map(|k| (start + Days::new(3 * k), "CREA", k % 7 == 0))
            .collect();
        let mut all = labs.clone();
        let end = start + Days::new(3 * 150 + 60);
        all.push((end, "CREA", false));
        let t = timeline(&all);
        let enc = encode_sequence(&t, &entry(Window::ending_at(end, 30)), &vocab, 100).unwrap();
        assert_eq!(enc.valid_length, 100);
        for (row, k) in enc.matrix.iter().zip(51..=150u64) {
            assert_eq!(row[0], 1);
            assert_eq!(row[1], u8::from(k % 7 == 0), "date {k}");
        }
    }

    #[test]
    fn too_few_dates_is_an_error() {
        let t = timeline(&[
            (d("2020-01-01"), "CREA", false),
            (d("2020-06-01"), "CREA", false),
        ]);
        let w = Window::ending_at(d("2020-06-01"), 30);
        assert!(matches!(
            encode_sequence(&t, &entry(w), &MarkerVocabulary::standard(), 100),
            Err(Error::TooFewEvents { found: 1, .. })
        ));
    }
}
