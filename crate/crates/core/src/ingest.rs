//! Patient and laboratory JSON-lines files.
//!
//! `patients.jsonl`: `patient_id`, `sex` (`"female"` | `"male"`), `birth_date`,
//! optional `death_date`. `labs.jsonl`: `patient_id`, `date`, `marker`,
//! `abnormal`. Dates are `YYYY-MM-DD`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::vocab::MarkerVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientDemographics {
    pub patient_id: String,
    pub sex: Sex,
    pub birth_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabEvent {
    pub patient_id: String,
    pub date: NaiveDate,
    pub marker: String,
    #[serde(deserialize_with = "flag")]
    pub abnormal: bool,
}

/// Accepts JSON booleans and the strings `"true"` / `"false"`.
fn flag<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Text(String),
    }
    match Flag::deserialize(de)? {
        Flag::Bool(b) => Ok(b),
        Flag::Text(s) => match s.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(serde::de::Error::custom(format!(
                "invalid abnormal flag `{other}`"
            ))),
        },
    }
}

/// One patient's demographics and laboratory history.
///
/// Events are sorted by `(date, marker)` and unique on that key; same-day
/// repeats of a marker are merged with `abnormal = OR`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientTimeline {
    pub demographics: PatientDemographics,
    events: Vec<LabEvent>,
}

impl PatientTimeline {
    pub fn new(demographics: PatientDemographics, mut events: Vec<LabEvent>) -> Self {
        events.sort_by(|a, b| (a.date, &a.marker).cmp(&(b.date, &b.marker)));
        let mut merged: Vec<LabEvent> = Vec::with_capacity(events.len());
        for ev in events {
            match merged.last_mut() {
                Some(last) if last.date == ev.date && last.marker == ev.marker => {
                    last.abnormal |= ev.abnormal;
                }
                _ => merged.push(ev),
            }
        }
        PatientTimeline {
            demographics,
            events: merged,
        }
    }

    pub fn patient_id(&self) -> &str {
        &self.demographics.patient_id
    }

    pub fn events(&self) -> &[LabEvent] {
        &self.events
    }

    /// Events recorded on `date`.
    pub fn events_on(&self, date: NaiveDate) -> &[LabEvent] {
        let lo = self.events.partition_point(|e| e.date < date);
        let hi = self.events.partition_point(|e| e.date <= date);
        &self.events[lo..hi]
    }

    /// Events with `marker`, in date order.
    pub fn marker_events<'a>(&'a self, marker: &'a str) -> impl Iterator<Item = &'a LabEvent> + 'a {
        self.events.iter().filter(move |e| e.marker == marker)
    }
}

fn read_jsonl<T, R>(reader: R, source: &Path) -> Result<Vec<(usize, T)>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_patients(path: &Path) -> Result<Vec<PatientDemographics>> {
    read_patients(open(path)?, path)
}

/// Parses and validates patient records; `source` is only used in messages.
pub fn read_patients<R: BufRead>(reader: R, source: &Path) -> Result<Vec<PatientDemographics>> {
    let records: Vec<(usize, PatientDemographics)> = read_jsonl(reader, source)?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for (line, p) in records {
        if p.patient_id.is_empty() {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line,
                message: "empty patient_id".into(),
            });
        }
        if let Some(death) = p.death_date {
            if death < p.birth_date {
                return Err(Error::DeathBeforeBirth {
                    patient_id: p.patient_id,
                    birth: p.birth_date,
                    death,
                });
            }
        }
        if !seen.insert(p.patient_id.clone()) {
            return Err(Error::DuplicatePatient(p.patient_id));
        }
        out.push(p);
    }
    Ok(out)
}

/// Laboratory events that survived vocabulary filtering.
#[derive(Debug, Clone, Default)]
pub struct LabLoad {
    pub events: Vec<LabEvent>,
    /// Events dropped because their marker is not in the vocabulary.
    pub discarded: usize,
}

pub fn load_labs(path: &Path, vocabulary: &MarkerVocabulary) -> Result<LabLoad> {
    read_labs(open(path)?, path, vocabulary)
}

pub fn read_labs<R: BufRead>(
    reader: R,
    source: &Path,
    vocabulary: &MarkerVocabulary,
) -> Result<LabLoad> {
    let records: Vec<(usize, LabEvent)> = read_jsonl(reader, source)?;
    let mut load = LabLoad::default();
    for (_, ev) in records {
        if vocabulary.contains(&ev.marker) {
            load.events.push(ev);
        } else {
            load.discarded += 1;
        }
    }
    Ok(load)
}

/// Timelines keyed by patient id, plus tallies of lab events that could not
/// be attached.
#[derive(Debug, Clone, Default)]
pub struct Timelines {
    pub patients: BTreeMap<String, PatientTimeline>,
    /// Lab events whose patient has no demographics record.
    pub orphan_events: usize,
    /// Lab events dated before birth or after death.
    pub out_of_range_events: usize,
}

impl Timelines {
    pub fn get(&self, patient_id: &str) -> Option<&PatientTimeline> {
        self.patients.get(patient_id)
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

pub fn build_timelines(patients: &[PatientDemographics], labs: &[LabEvent]) -> Timelines {
    let mut grouped: BTreeMap<&str, (&PatientDemographics, Vec<LabEvent>)> = patients
        .iter()
        .map(|p| (p.patient_id.as_str(), (p, Vec::new())))
        .collect();
    let mut orphan_events = 0;
    let mut out_of_range_events = 0;
    for ev in labs {
        let Some((demo, events)) = grouped.get_mut(ev.patient_id.as_str()) else {
            orphan_events += 1;
            continue;
        };
        let after_death = demo.death_date.is_some_and(|d| ev.date > d);
        if ev.date < demo.birth_date || after_death {
            out_of_range_events += 1;
            continue;
        }
        events.push(ev.clone());
    }
    let patients = grouped
        .into_iter()
        .map(|(id, (demo, events))| (id.to_string(), PatientTimeline::new(demo.clone(), events)))
        .collect();
    Timelines {
        patients,
        orphan_events,
        out_of_range_events,
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn src() -> &'static Path {
        Path::new("test.jsonl")
    }

    fn demo(id: &str) -> PatientDemographics {
        PatientDemographics {
            patient_id: id.into(),
            sex: Sex::Female,
            birth_date: d("2010-01-01"),
            death_date: None,
        }
    }

    fn lab(id: &str, date: &str, marker: &str, abnormal: bool) -> LabEvent {
        LabEvent {
            patient_id: id.into(),
            date: d(date),
            marker: marker.into(),
            abnormal,
        }
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(read_patients("".as_bytes(), src()).unwrap().is_empty());
    }

    #[test]
    fn parses_one_patient() {
        let line = r#"{"patient_id":"P1","sex":"male","birth_date":"2012-03-04","death_date":"2020-01-01"}"#;
        let p = read_patients(line.as_bytes(), src()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].sex, Sex::Male);
        assert_eq!(p[0].birth_date, d("2012-03-04"));
        assert_eq!(p[0].death_date, Some(d("2020-01-01")));
    }

    #[test]
    fn death_before_birth_is_rejected() {
        let line = r#"{"patient_id":"P1","sex":"male","birth_date":"2020-01-01","death_date":"2019-01-01"}"#;
        assert!(matches!(
            read_patients(line.as_bytes(), src()),
            Err(Error::DeathBeforeBirth { .. })
        ));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text =
            "{\"patient_id\":\"P1\",\"sex\":\"male\",\"birth_date\":\"2012-03-04\"}\n{oops}\n";
        match read_patients(text.as_bytes(), src()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_patient_is_rejected() {
        let l = r#"{"patient_id":"P1","sex":"male","birth_date":"2012-03-04"}"#;
        let text = format!("{l}\n{l}\n");
        assert!(matches!(
            read_patients(text.as_bytes(), src()),
            Err(Error::DuplicatePatient(_))
        ));
    }

    #[test]
    fn lab_filtering_and_flags() {
        let vocab = MarkerVocabulary::standard();
        let text = [
            r#"{"patient_id":"P1","date":"2020-01-01","marker":"CREA","abnormal":"true"}"#,
            r#"{"patient_id":"P1","date":"2020-01-01","marker":"GLUCOSE","abnormal":false}"#,
            r#"{"patient_id":"P1","date":"2020-01-02","marker":"K","abnormal":false}"#,
            r#"{"patient_id":"P1","date":"2020-01-02","marker":"K","abnormal":false}"#,
        ]
        .join("\n");
        let load = read_labs(text.as_bytes(), src(), &vocab).unwrap();
        assert_eq!(load.discarded, 1);
        assert_eq!(load.events.len(), 3);
        assert!(load.events[0].abnormal);
    }

    #[test]
    fn bad_lab_date_is_an_error() {
        let vocab = MarkerVocabulary::standard();
        let text = r#"{"patient_id":"P1","date":"2020-13-01","marker":"CREA","abnormal":true}"#;
        assert!(matches!(
            read_labs(text.as_bytes(), src(), &vocab),
            Err(Error::Parse { line: 1, .. })
        ));
        let missing = r#"{"patient_id":"P1","date":"2020-01-01","marker":"CREA"}"#;
        assert!(read_labs(missing.as_bytes(), src(), &vocab).is_err());
    }

    #[test]
    fn duplicates_are_or_merged() {
        let t = build_timelines(
            &[demo("P1")],
            &[
                lab("P1", "2020-01-01", "CREA", false),
                lab("P1", "2020-01-01", "CREA", true),
            ],
        );
        let ev = t.get("P1").unwrap().events();
        assert_eq!(ev.len(), 1);
        assert!(ev[0].abnormal);
    }

    #[test]
    fn patient_without_labs_has_empty_timeline() {
        let t = build_timelines(&[demo("P1")], &[]);
        assert!(t.get("P1").unwrap().events().is_empty());
    }

    #[test]
    fn orphans_and_out_of_range_are_tallied() {
        let mut dead = demo("P2");
        dead.death_date = Some(d("2021-01-01"));
        let t = build_timelines(
            &[demo("P1"), dead],
            &[
                lab("P9", "2020-01-01", "CREA", false),
                lab("P1", "2009-01-01", "CREA", false),
                lab("P2", "2021-01-02", "CREA", false),
                lab("P2", "2021-01-01", "CREA", false),
            ],
        );
        assert_eq!(t.orphan_events, 1);
        assert_eq!(t.out_of_range_events, 2);
        assert_eq!(t.get("P2").unwrap().events().len(), 1);
    }

    #[test]
    fn events_on_returns_same_day_slice() {
        let t = PatientTimeline::new(
            demo("P1"),
            vec![
                lab("P1", "2020-01-02", "K", false),
                lab("P1", "2020-01-01", "CREA", false),
                lab("P1", "2020-01-02", "CREA", true),
            ],
        );
        let day = t.events_on(d("2020-01-02"));
        assert_eq!(day.len(), 2);
        assert_eq!(day[0].marker, "CREA");
        assert!(t.events_on(d("2020-01-03")).is_empty());
    }
}
