#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use renalseq_core::vocab::MarkerVocabulary;
use renalseq_core::{LabEvent, PatientDemographics, Sex};

pub const MARKERS: [&str; 4] = ["CREA", "K", "NA", "HB"];

pub fn vocab() -> MarkerVocabulary {
    MarkerVocabulary::new(MARKERS.to_vec(), "CREA").unwrap()
}

pub fn day(offset: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + Days::new(offset)
}

#[derive(Debug, Clone)]
pub struct RawPatient {
    pub demographics: PatientDemographics,
    pub labs: Vec<LabEvent>,
}

/// One patient with up to `max_events` lab results over roughly a year and a
/// half, creatinine-heavy, with an optional death date.
pub fn raw_patient(id: String, max_events: usize) -> impl Strategy<Value = RawPatient> {
    (
        prop::collection::vec((0u64..500, 0usize..6, any::<bool>()), 0..max_events),
        prop::option::weighted(0.3, 0u64..560),
        any::<bool>(),
        0u64..5000,
    )
        .prop_map(move |(events, death, male, age)| {
            let birth = day(0) - Days::new(age);
            let labs = events
                .into_iter()
                .map(|(d, m, abnormal)| LabEvent {
                    patient_id: id.clone(),
                    date: day(d),
                    // indices past the panel map to creatinine
                    marker: MARKERS[m.min(MARKERS.len()) % MARKERS.len()].to_string(),
                    abnormal,
                })
                .collect::<Vec<_>>();
            let last = labs.iter().map(|l| l.date).max();
            let death_date = death.map(|d| last.map_or(day(d), |l| l.max(day(d))));
            RawPatient {
                demographics: PatientDemographics {
                    patient_id: id.clone(),
                    sex: if male { Sex::Male } else { Sex::Female },
                    birth_date: birth,
                    death_date,
                },
                labs,
            }
        })
}

pub fn raw_cohort(
    max_patients: usize,
    max_events: usize,
) -> impl Strategy<Value = Vec<RawPatient>> {
    (1..=max_patients).prop_flat_map(move |n| {
        (0..n)
            .map(|i| raw_patient(format!("P{i:03}"), max_events))
            .collect::<Vec<_>>()
    })
}

pub fn flatten(cohort: &[RawPatient]) -> (Vec<PatientDemographics>, Vec<LabEvent>) {
    let patients = cohort.iter().map(|p| p.demographics.clone()).collect();
    let labs = cohort.iter().flat_map(|p| p.labs.clone()).collect();
    (patients, labs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expected {
    NoCreatinine,
    TooFew,
    DeceasedNoWindow,
    Label(u8),
}

/// Direct reading of the cohort rules over raw events.
pub fn brute_force_outcome(p: &RawPatient) -> Expected {
    let crea: Vec<&LabEvent> = p.labs.iter().filter(|l| l.marker == "CREA").collect();
    if crea.is_empty() {
        return Expected::NoCreatinine;
    }
    let last = crea.iter().map(|l| l.date).max().unwrap();
    let t_end = p.demographics.death_date.unwrap_or(last);
    let in_window = |d: NaiveDate| (t_end - d).num_days() >= 0 && (t_end - d).num_days() <= 30;
    let before: BTreeSet<NaiveDate> = crea
        .iter()
        .map(|l| l.date)
        .filter(|&d| (t_end - d).num_days() > 30)
        .collect();
    if before.len() < 3 {
        return Expected::TooFew;
    }
    if p.demographics.death_date.is_some() && !crea.iter().any(|l| in_window(l.date)) {
        return Expected::DeceasedNoWindow;
    }
    Expected::Label(u8::from(
        crea.iter().any(|l| l.abnormal && in_window(l.date)),
    ))
}

/// Presence/abnormal bits per (date, marker) from raw events.
pub fn brute_force_rows(p: &RawPatient) -> BTreeMap<NaiveDate, Vec<u8>> {
    let mut rows: BTreeMap<NaiveDate, Vec<u8>> = BTreeMap::new();
    for l in &p.labs {
        let m = MARKERS.iter().position(|c| *c == l.marker).unwrap();
        let row = rows
            .entry(l.date)
            .or_insert_with(|| vec![0; 2 * MARKERS.len()]);
        row[2 * m] = 1;
        if l.abnormal {
            row[2 * m + 1] = 1;
        }
    }
    rows
}
