//! Synthetic cohorts with a known latent renal-severity process.
//!
//! Each patient has a baseline severity `b` and a severity `s_k` at visit `k`
//! that reverts toward it:
//!
//! ```text
//! s_{k+1} = b + (1 - reversion)(s_k - b) + drift · ε_k,   ε_k ~ N(0, 1)
//! ```
//!
//! Visits are separated by geometric gaps. Creatinine is measured at every
//! visit, every other marker with its own inclusion probability, and marker
//! `m` is flagged abnormal with probability `σ(informativeness_m · s + offset_m)`.
//! Death can follow any visit with probability `1 - exp(-hazard · e^s)`.
//!
//! Because the law is known, the probability that a patient's prediction
//! window contains an abnormal creatinine can be computed given the latent
//! state at the last pre-window visit ([`bayes_scores`]). No observable
//! history carries more information, so its AUC bounds what a model can reach.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortEntry, Window, WINDOW_DAYS};
use crate::error::{Error, Result};
use crate::gru::sigmoid;
use crate::ingest::{write_jsonl, LabEvent, PatientDemographics, Sex};
use crate::rng;
use crate::vocab::{MarkerVocabulary, CREATININE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerProfile {
    pub code: String,
    /// Probability the marker is measured at a visit (creatinine: always 1).
    pub inclusion: f64,
    /// Coupling of the abnormal-flag log-odds to severity.
    pub informativeness: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub markers: Vec<MarkerProfile>,
    pub creatinine: String,
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    pub max_age_years: u32,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// Per-visit innovation standard deviation.
    pub severity_drift: f64,
    /// Share of the deviation from baseline removed per visit, in (0, 1].
    pub severity_reversion: f64,
    /// Mean of the geometric inter-visit gap, days.
    pub visit_gap_days: f64,
    /// Share of patients followed for 1-6 years; the rest for 1-8 months.
    pub long_follow_up_fraction: f64,
    pub death_hazard_scale: f64,
    /// Mean of the geometric delay from the last visit to death, days.
    pub death_lag_days: f64,
    pub window_days: u64,
    /// Monte-Carlo draws per patient for the oracle score.
    pub oracle_samples: usize,
}

const DEFAULT_PANEL: [(&str, f64, f64, f64); 15] = [
    // code, inclusion, informativeness, offset
    ("CREA", 1.00, 1.60, 0.00),
    ("UREA", 0.85, 0.70, -0.60),
    ("K", 0.80, 0.45, -1.10),
    ("NA", 0.80, 0.30, -1.30),
    ("HCO3", 0.65, 0.55, -0.90),
    ("PHOS", 0.55, 0.60, -0.70),
    ("CA", 0.60, 0.35, -1.00),
    ("ALB", 0.55, 0.40, -0.90),
    ("HB", 0.70, 0.50, -0.40),
    ("CRP", 0.45, 0.20, -0.80),
    ("MG", 0.35, 0.30, -1.20),
    ("ALP", 0.40, 0.25, -0.70),
    ("PTH", 0.20, 0.65, -0.30),
    ("WBC", 0.60, 0.15, -0.90),
    ("PLT", 0.60, 0.15, -1.10),
];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 1200,
            seed: 42,
            markers: DEFAULT_PANEL
                .iter()
                .map(
                    |&(code, inclusion, informativeness, offset)| MarkerProfile {
                        code: code.into(),
                        inclusion,
                        informativeness,
                        offset,
                    },
                )
                .collect(),
            creatinine: CREATININE.into(),
            study_start: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            study_end: NaiveDate::from_ymd_opt(2025, 12, 31).expect("valid date"),
            max_age_years: 16,
            baseline_mean: -0.45,
            baseline_sd: 1.0,
            severity_drift: 0.25,
            severity_reversion: 0.2,
            visit_gap_days: 21.0,
            long_follow_up_fraction: 0.6,
            death_hazard_scale: 0.001,
            death_lag_days: 45.0,
            window_days: WINDOW_DAYS,
            oracle_samples: 10_000,
        }
    }
}

impl SynthConfig {
    /// Same process with every marker decoupled from severity.
    pub fn without_signal(mut self) -> Self {
        for m in &mut self.markers {
            m.informativeness = 0.0;
        }
        self
    }

    /// Multiplies every marker's informativeness by `scale`.
    pub fn scale_signal(mut self, scale: f64) -> Self {
        for m in &mut self.markers {
            m.informativeness *= scale;
        }
        self
    }

    pub fn vocabulary(&self) -> Result<MarkerVocabulary> {
        MarkerVocabulary::new(
            self.markers.iter().map(|m| m.code.clone()).collect(),
            &self.creatinine,
        )
    }

    fn creatinine_profile(&self) -> &MarkerProfile {
        self.markers
            .iter()
            .find(|m| m.code == self.creatinine)
            .expect("validated vocabulary contains creatinine")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        self.vocabulary()?;
        let rates = [
            self.baseline_sd,
            self.severity_drift,
            self.visit_gap_days,
            self.death_hazard_scale,
            self.death_lag_days,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("synthetic rates must be positive".into()));
        }
        if !(self.severity_reversion > 0.0 && self.severity_reversion <= 1.0) {
            return Err(Error::Config(
                "severity_reversion must lie in (0, 1]".into(),
            ));
        }
        if self.visit_gap_days < 1.0 || self.death_lag_days < 1.0 {
            return Err(Error::Config(
                "geometric means must be at least one day".into(),
            ));
        }
        let probs = self
            .markers
            .iter()
            .map(|m| m.inclusion)
            .chain([self.long_follow_up_fraction]);
        if probs.into_iter().any(|p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.creatinine_profile().inclusion != 1.0 {
            return Err(Error::Config(
                "creatinine must be measured at every visit".into(),
            ));
        }
        if self.study_end <= self.study_start || self.oracle_samples == 0 {
            return Err(Error::Config(
                "empty study period or oracle sample count".into(),
            ));
        }
        Ok(())
    }

    pub fn law(&self) -> LatentLaw {
        let crea = self.creatinine_profile();
        LatentLaw {
            reversion: self.severity_reversion,
            drift: self.severity_drift,
            creatinine_informativeness: crea.informativeness,
            creatinine_offset: crea.offset,
            samples: self.oracle_samples,
            seed: rng::derive_seed(self.seed, "oracle"),
        }
    }
}

/// The parts of the generator needed to score a prediction window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentLaw {
    pub reversion: f64,
    pub drift: f64,
    pub creatinine_informativeness: f64,
    pub creatinine_offset: f64,
    pub samples: usize,
    pub seed: u64,
}

impl LatentLaw {
    fn stationary_sd(&self) -> f64 {
        let persist = 1.0 - self.reversion;
        self.drift / (1.0 - persist * persist).sqrt()
    }

    fn abnormal_probability(&self, severity: f64) -> f64 {
        sigmoid(self.creatinine_informativeness * severity + self.creatinine_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub baseline: f64,
    /// Latent severity at each visit.
    pub trajectory: Vec<(NaiveDate, f64)>,
    /// Oracle score for the generator's own follow-up window.
    pub bayes_score: f64,
}

impl PatientTruth {
    /// P(at least one abnormal creatinine among the window's visits), given
    /// the latent severity at the last visit before the window. Severity paths
    /// are sampled; flag draws are integrated exactly.
    pub fn window_probability(&self, law: &LatentLaw, window: &Window) -> f64 {
        let start_state = self
            .trajectory
            .iter()
            .rev()
            .find(|(d, _)| window.is_before(*d))
            .map(|&(_, s)| s);
        let visits = self
            .trajectory
            .iter()
            .filter(|(d, _)| window.contains(*d))
            .count();
        if visits == 0 {
            return 0.0;
        }
        let mut rng = rng::seeded(rng::derive_seed(law.seed, &self.patient_id));
        let persist = 1.0 - law.reversion;
        let stationary = law.stationary_sd();
        let mut total = 0.0;
        for _ in 0..law.samples {
            let mut s = start_state.unwrap_or(f64::NAN);
            let mut none_abnormal = 1.0;
            for v in 0..visits {
                let eps: f64 = StandardNormal.sample(&mut rng);
                s = if v == 0 && start_state.is_none() {
                    self.baseline + stationary * eps
                } else {
                    self.baseline + persist * (s - self.baseline) + law.drift * eps
                };
                none_abnormal *= 1.0 - law.abnormal_probability(s);
            }
            total += 1.0 - none_abnormal;
        }
        total / law.samples as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub law: LatentLaw,
    pub patients: Vec<PatientTruth>,
}

impl SynthTruth {
    pub fn get(&self, patient_id: &str) -> Option<&PatientTruth> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(patient_id))
            .ok()
            .map(|i| &self.patients[i])
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        write_jsonl(w, &self.patients)
    }

    pub fn read_jsonl<R: BufRead>(reader: R, law: LatentLaw) -> Result<Self> {
        let mut patients: Vec<PatientTruth> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("truth.jsonl", e))?;
            if line.trim().is_empty() {
                continue;
            }
            patients.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: "truth.jsonl".into(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        Ok(SynthTruth { law, patients })
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub patients: Vec<PatientDemographics>,
    pub labs: Vec<LabEvent>,
    pub truth: SynthTruth,
}

impl SynthCohort {
    pub fn write_patients<W: Write>(&self, w: W) -> Result<()> {
        write_jsonl(w, &self.patients)
    }

    pub fn write_labs<W: Write>(&self, w: W) -> Result<()> {
        write_jsonl(w, &self.labs)
    }
}

struct GeneratedPatient {
    demographics: PatientDemographics,
    labs: Vec<LabEvent>,
    truth: PatientTruth,
}

fn geometric_days(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    // support {1, 2, ...}, mean `mean`
    let failures = Geometric::new(1.0 / mean)
        .expect("validated mean")
        .sample(rng);
    1 + failures
}

fn generate_patient(cfg: &SynthConfig, law: &LatentLaw, index: usize) -> GeneratedPatient {
    let mut rng = rng::seeded(rng::index_seed(cfg.seed, index as u64));
    let patient_id = format!("P{:05}", index + 1);
    let sex = if rng.random_bool(0.5) {
        Sex::Male
    } else {
        Sex::Female
    };

    let study_days = (cfg.study_end - cfg.study_start).num_days() as u64;
    let start = cfg.study_start + Days::new(rng.random_range(0..study_days * 5 / 6));
    let duration = if rng.random_bool(cfg.long_follow_up_fraction) {
        rng.random_range(365..=6 * 365)
    } else {
        rng.random_range(30..=240)
    };
    let planned_end = (start + Days::new(duration)).min(cfg.study_end);
    let age_days = rng.random_range(0..=u64::from(cfg.max_age_years) * 365);
    let birth_date = start - Days::new(age_days);

    let baseline = cfg.baseline_mean + cfg.baseline_sd * rng.sample::<f64, _>(StandardNormal);
    let persist = 1.0 - cfg.severity_reversion;
    let mut severity = baseline + law.stationary_sd() * rng.sample::<f64, _>(StandardNormal);
    let mut date = start;
    let mut trajectory = Vec::new();
    let mut labs = Vec::new();
    let mut death_date = None;

    loop {
        trajectory.push((date, severity));
        for m in &cfg.markers {
            if m.inclusion < 1.0 && !rng.random_bool(m.inclusion) {
                continue;
            }
            let p = sigmoid(m.informativeness * severity + m.offset);
            labs.push(LabEvent {
                patient_id: patient_id.clone(),
                date,
                marker: m.code.clone(),
                abnormal: rng.random_bool(p),
            });
        }
        let p_death = 1.0 - (-cfg.death_hazard_scale * severity.exp()).exp();
        if rng.random_bool(p_death.clamp(0.0, 1.0)) {
            let died = date + Days::new(geometric_days(&mut rng, cfg.death_lag_days));
            if died <= cfg.study_end {
                death_date = Some(died);
            }
            break;
        }
        date = date + Days::new(geometric_days(&mut rng, cfg.visit_gap_days));
        if date > planned_end {
            break;
        }
        let eps: f64 = rng.sample(StandardNormal);
        severity = baseline + persist * (severity - baseline) + cfg.severity_drift * eps;
    }

    let t_end = death_date.unwrap_or(date.min(trajectory.last().expect("one visit").0));
    let mut truth = PatientTruth {
        patient_id: patient_id.clone(),
        baseline,
        trajectory,
        bayes_score: 0.0,
    };
    truth.bayes_score = truth.window_probability(law, &Window::ending_at(t_end, cfg.window_days));
    GeneratedPatient {
        demographics: PatientDemographics {
            patient_id,
            sex,
            birth_date,
            death_date,
        },
        labs,
        truth,
    }
}

/// Generates `n_patients` patients. Deterministic in the config, including
/// the seed; patients are generated independently and merged in id order.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let law = cfg.law();
    let generated: Vec<GeneratedPatient> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, &law, i))
        .collect();
    let mut patients = Vec::with_capacity(generated.len());
    let mut labs = Vec::new();
    let mut truths = Vec::with_capacity(generated.len());
    for g in generated {
        patients.push(g.demographics);
        labs.extend(g.labs);
        truths.push(g.truth);
    }
    Ok(SynthCohort {
        patients,
        labs,
        truth: SynthTruth {
            law,
            patients: truths,
        },
    })
}

/// Oracle probability of a positive label for every cohort entry that has a
/// window, keyed by patient id.
pub fn bayes_scores(truth: &SynthTruth, cohort: &[CohortEntry]) -> Result<BTreeMap<String, f64>> {
    let with_window: Vec<(&CohortEntry, Window)> = cohort
        .iter()
        .filter_map(|e| e.window.map(|w| (e, w)))
        .collect();
    let scored: Vec<(String, f64)> = with_window
        .par_iter()
        .map(|(e, w)| {
            let patient = truth
                .get(&e.patient_id)
                .ok_or_else(|| Error::UnknownPatient(e.patient_id.clone()))?;
            Ok((
                e.patient_id.clone(),
                patient.window_probability(&truth.law, w),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            oracle_samples: 200,
            ..SynthConfig::default()
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn law(offset: f64) -> LatentLaw {
        LatentLaw {
            reversion: 0.2,
            drift: 0.3,
            creatinine_informativeness: 1.0,
            creatinine_offset: offset,
            samples: 10_000,
            seed: 5,
        }
    }

    fn truth_with_window_visits() -> (PatientTruth, Window) {
        let t = PatientTruth {
            patient_id: "P1".into(),
            baseline: 0.0,
            trajectory: vec![
                (d("2020-01-01"), 0.1),
                (d("2020-02-01"), -0.3),
                (d("2020-03-01"), 0.2),
                (d("2020-05-10"), 0.0),
                (d("2020-05-30"), 0.0),
            ],
            bayes_score: 0.0,
        };
        (t, Window::ending_at(d("2020-05-30"), 30))
    }

    #[test]
    fn zero_patients_is_an_error() {
        assert!(generate_cohort(&small(0)).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_cohort(&small(40)).unwrap();
        let b = generate_cohort(&small(40)).unwrap();
        let bytes = |c: &SynthCohort| {
            let mut v = Vec::new();
            c.write_patients(&mut v).unwrap();
            c.write_labs(&mut v).unwrap();
            c.truth.write_jsonl(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_cohort(&SynthConfig {
            seed: 7,
            ..small(40)
        })
        .unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn creatinine_at_every_visit_and_dates_in_range() {
        let c = generate_cohort(&small(60)).unwrap();
        for (demo, truth) in c.patients.iter().zip(&c.truth.patients) {
            let crea: Vec<NaiveDate> = c
                .labs
                .iter()
                .filter(|l| l.patient_id == demo.patient_id && l.marker == "CREA")
                .map(|l| l.date)
                .collect();
            let visits: Vec<NaiveDate> = truth.trajectory.iter().map(|t| t.0).collect();
            assert_eq!(crea, visits);
            assert!(visits.windows(2).all(|w| w[0] < w[1]));
            assert!(visits[0] >= demo.birth_date);
            if let Some(death) = demo.death_date {
                assert!(*visits.last().unwrap() < death);
            }
            assert!((0.0..=1.0).contains(&truth.bayes_score));
        }
    }

    #[test]
    fn certain_abnormal_scores_one() {
        let (t, w) = truth_with_window_visits();
        assert_eq!(t.window_probability(&law(1e3), &w), 1.0);
    }

    #[test]
    fn impossible_abnormal_scores_zero() {
        let (t, w) = truth_with_window_visits();
        assert!(t.window_probability(&law(-1e3), &w) < 1e-12);
    }

    #[test]
    fn no_window_visits_scores_zero() {
        let (t, _) = truth_with_window_visits();
        let w = Window::ending_at(d("2021-01-01"), 30);
        assert_eq!(t.window_probability(&law(0.0), &w), 0.0);
    }

    #[test]
    fn one_visit_without_drift_is_closed_form() {
        let (mut t, _) = truth_with_window_visits();
        t.trajectory.truncate(4);
        let w = Window::ending_at(d("2020-05-10"), 30);
        let mut l = law(0.4);
        l.drift = 1e-12;
        // s_window = (1 - 0.2) · 0.2 exactly, so P = σ(0.16 + 0.4)
        let p = t.window_probability(&l, &w);
        assert!((p - sigmoid(0.16 + 0.4)).abs() < 1e-9);
    }

    #[test]
    fn bayes_scores_rejects_unknown_patients() {
        let c = generate_cohort(&small(3)).unwrap();
        let entry = CohortEntry {
            patient_id: "nobody".into(),
            window: Some(Window::ending_at(d("2020-01-01"), 30)),
            label: Some(0),
            split: None,
            exclusion_reason: None,
        };
        assert!(matches!(
            bayes_scores(&c.truth, &[entry]),
            Err(Error::UnknownPatient(_))
        ));
    }

    #[test]
    fn truth_round_trips() {
        let c = generate_cohort(&small(5)).unwrap();
        let mut buf = Vec::new();
        c.truth.write_jsonl(&mut buf).unwrap();
        let back = SynthTruth::read_jsonl(buf.as_slice(), c.truth.law).unwrap();
        assert_eq!(back, c.truth);
    }
}
