//! One function per pipeline stage. Each verifies its upstream manifests,
//! reads only what it needs, writes its outputs atomically and finishes with
//! its own manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use renalseq_core::baseline::{LastEventLogistic, DEFAULT_RIDGE};
use renalseq_core::cohort::{build_cohort, stratified_split};
use renalseq_core::encode::{encode_cohort, event_dates, EncodingManifest};
use renalseq_core::eval::{auc_trapezoid, bootstrap_auc_ci, confusion_at, roc_points};
use renalseq_core::ingest::{build_timelines, read_labs, read_patients, write_jsonl, LabLoad};
use renalseq_core::synth::{bayes_scores, generate_cohort, LatentLaw};
use renalseq_core::train::{run_training, scored_set, split_of};
use renalseq_core::tsne::run_tsne;
use renalseq_core::{
    gru, rng, Checkpoint, CohortEntry, ConfusionMatrix, Embedding2D, EncodedSequence,
    PatientDemographics, ScoredSet, Split, SynthTruth, Timelines,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{fingerprint, sha256_hex, Stage, StageManifest, StageRun};
use crate::svg;

pub const PATIENTS: &str = "data/patients.jsonl";
pub const LABS: &str = "data/labs.jsonl";
pub const TRUTH: &str = "data/truth.jsonl";
pub const COHORT: &str = "cohort.jsonl";
pub const ENCODED: &str = "encoded.jsonl";
pub const ENCODING_MANIFEST: &str = "manifest.json";
pub const MODEL: &str = "model.json";
pub const HISTORY: &str = "history.json";
pub const SCORES: &str = "scores.csv";
pub const METRICS: &str = "metrics.json";
pub const ROC: &str = "roc.csv";
pub const CONFUSION: &str = "confusion.json";
pub const TSNE: &str = "tsne.csv";
pub const KL_TRACE: &str = "kl_trace.csv";

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> CliResult<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(renalseq_core::Error::from)?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn jsonl<T: Serialize>(records: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    Ok(buf)
}

fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> CliResult<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::invalid(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::invalid(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::invalid(path, e))
}

fn csv_bytes<R: Serialize>(
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let write_err = |e: csv::Error| CliError::Config(format!("csv: {e}"));
    w.write_record(header).map_err(write_err)?;
    for r in rows {
        w.serialize(r).map_err(write_err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Config(format!("csv: {e}")))
}

fn parse_csv<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> CliResult<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::invalid(path, e))
}

fn value<T: Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v).map_err(renalseq_core::Error::from)?)
}

fn auc_or_null(s: &ScoredSet) -> Value {
    auc_trapezoid(s).map_or(Value::Null, |a| json!(a))
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let out = cfg.out.clone();
        Ok(Pipeline { cfg, out })
    }

    fn deps(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Synth => vec![],
            Stage::Cohort if self.cfg.uses_synthetic_data() => vec![Stage::Synth],
            Stage::Cohort => vec![],
            Stage::Encode => vec![Stage::Cohort],
            Stage::Train => vec![Stage::Encode],
            Stage::Eval | Stage::Tsne => vec![Stage::Train],
            Stage::Report => vec![Stage::Eval, Stage::Tsne],
        }
    }

    fn params(&self, stage: Stage) -> CliResult<Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Synth => value(&c.synth_config())?,
            Stage::Cohort => {
                let data = if c.uses_synthetic_data() {
                    json!("synthetic")
                } else {
                    let hash = |p: &str| -> CliResult<String> {
                        Ok(sha256_hex(&crate::manifest::read_bytes(Path::new(p))?))
                    };
                    json!({"patients": hash(&c.patients)?, "labs": hash(&c.labs)?})
                };
                json!({
                    "data": data,
                    "markers": c.markers,
                    "creatinine": c.creatinine,
                    "vocabulary_hash": c.vocabulary()?.hash(),
                    "window_days": c.window_days,
                    "min_pre_window_days": c.min_pre_window_days,
                    "split": [c.split_train, c.split_validation, c.split_test],
                    "split_seed": c.stage_seed("split"),
                })
            }
            Stage::Encode => json!({"max_sequence_len": c.max_sequence_len}),
            Stage::Train => value(&c.train_config())?,
            Stage::Eval => json!({
                "bootstrap_resamples": c.bootstrap_resamples,
                "decision_threshold": c.decision_threshold,
                "bootstrap_seed": c.stage_seed("eval"),
            }),
            Stage::Tsne => value(&c.tsne_config())?,
            Stage::Report => json!({
                "timeline_patients": c.report_timeline_patients,
                "sample_seed": c.stage_seed("report"),
            }),
        })
    }

    /// Fingerprint this config implies for `stage`, chained through its
    /// upstream stages.
    pub fn fingerprint(&self, stage: Stage) -> CliResult<String> {
        let upstream = self
            .deps(stage)
            .into_iter()
            .map(|d| self.fingerprint(d))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(fingerprint(stage, &self.params(stage)?, &upstream))
    }

    fn begin(&self, stage: Stage) -> CliResult<(StageRun, BTreeMap<Stage, StageManifest>)> {
        let mut run = StageRun::new(&self.out, stage);
        let mut upstream = BTreeMap::new();
        for dep in self.deps(stage) {
            let m = run.require(dep, &self.fingerprint(dep)?)?;
            upstream.insert(dep, m);
        }
        Ok((run, upstream))
    }

    fn finish(&self, run: StageRun, summary: Value) -> CliResult<StageManifest> {
        let stage = run.stage;
        run.finish(self.fingerprint(stage)?, self.params(stage)?, summary)
    }

    pub fn run_stage(&self, stage: Stage) -> CliResult<StageManifest> {
        let result = match stage {
            Stage::Synth => self.synth(),
            Stage::Cohort => self.cohort(),
            Stage::Encode => self.encode(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Tsne => self.tsne(),
            Stage::Report => self.report(),
        };
        result.map_err(|e| e.in_stage(stage.name()))
    }

    pub fn run_all(&self) -> CliResult<()> {
        let mut stages = vec![
            Stage::Cohort,
            Stage::Encode,
            Stage::Train,
            Stage::Eval,
            Stage::Tsne,
            Stage::Report,
        ];
        if self.cfg.uses_synthetic_data() {
            stages.insert(0, Stage::Synth);
        }
        for stage in stages {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn synth(&self) -> CliResult<StageManifest> {
        if !self.cfg.uses_synthetic_data() {
            return Err(CliError::Config(
                "patients and labs are configured; synthetic data would not be used".into(),
            ));
        }
        let (mut run, _) = self.begin(Stage::Synth)?;
        let sc = self.cfg.synth_config();
        let cohort = generate_cohort(&sc)?;
        run.write(PATIENTS, &jsonl(&cohort.patients)?)?;
        run.write(LABS, &jsonl(&cohort.labs)?)?;
        let mut truth = Vec::new();
        cohort.truth.write_jsonl(&mut truth)?;
        run.write(TRUTH, &truth)?;
        let deaths = cohort
            .patients
            .iter()
            .filter(|p| p.death_date.is_some())
            .count();
        self.finish(
            run,
            json!({
                "patients": cohort.patients.len(),
                "lab_events": cohort.labs.len(),
                "deaths": deaths,
                "law": cohort.truth.law,
            }),
        )
    }

    /// Patients and labs, from the synthetic tree or the configured paths.
    /// External files are checked against the hashes the cohort stage saw.
    fn load_data(
        &self,
        run: &mut StageRun,
        cohort_manifest: Option<&StageManifest>,
    ) -> CliResult<(Vec<PatientDemographics>, LabLoad)> {
        let vocab = self.cfg.vocabulary()?;
        let (patients_path, patients, labs_path, labs) = if self.cfg.uses_synthetic_data() {
            (
                run.path(PATIENTS),
                run.read(PATIENTS)?,
                run.path(LABS),
                run.read(LABS)?,
            )
        } else {
            let p = PathBuf::from(&self.cfg.patients);
            let l = PathBuf::from(&self.cfg.labs);
            let pb = run.read_external(&p)?;
            let lb = run.read_external(&l)?;
            if let Some(m) = cohort_manifest {
                for (path, bytes) in [(&p, &pb), (&l, &lb)] {
                    let key = path.display().to_string();
                    if m.inputs.get(&key) != Some(&sha256_hex(bytes)) {
                        return Err(CliError::Tampered(key));
                    }
                }
            }
            (p, pb, l, lb)
        };
        let patients = read_patients(patients.as_slice(), &patients_path)?;
        let labs = read_labs(labs.as_slice(), &labs_path, &vocab)?;
        Ok((patients, labs))
    }

    fn timelines(
        &self,
        run: &mut StageRun,
        cohort_manifest: Option<&StageManifest>,
    ) -> CliResult<Timelines> {
        let (patients, labs) = self.load_data(run, cohort_manifest)?;
        Ok(build_timelines(&patients, &labs.events))
    }

    fn read_cohort(&self, run: &mut StageRun) -> CliResult<Vec<CohortEntry>> {
        let bytes = run.read(COHORT)?;
        parse_jsonl(&bytes, &run.path(COHORT))
    }

    fn read_encoded(&self, run: &mut StageRun) -> CliResult<Vec<EncodedSequence>> {
        let bytes = run.read(ENCODED)?;
        parse_jsonl(&bytes, &run.path(ENCODED))
    }

    fn read_model(&self, run: &mut StageRun) -> CliResult<Checkpoint> {
        let bytes = run.read(MODEL)?;
        let text =
            std::str::from_utf8(&bytes).map_err(|e| CliError::invalid(&run.path(MODEL), e))?;
        let checkpoint = Checkpoint::from_json(text)?;
        checkpoint
            .ensure_vocabulary(&self.cfg.vocabulary()?.hash())
            .map_err(|e| CliError::Stale(e.to_string()))?;
        Ok(checkpoint)
    }

    pub fn cohort(&self) -> CliResult<StageManifest> {
        let (mut run, _) = self.begin(Stage::Cohort)?;
        let vocab = self.cfg.vocabulary()?;
        let (patients, labs) = self.load_data(&mut run, None)?;
        let timelines = build_timelines(&patients, &labs.events);
        let entries = build_cohort(&timelines, &vocab, &self.cfg.cohort_rules());
        let entries = stratified_split(
            entries,
            &self.cfg.split_fractions()?,
            self.cfg.stage_seed("split"),
        )?;
        run.write(COHORT, &jsonl(&entries)?)?;

        let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
        let mut splits: BTreeMap<String, [usize; 2]> = BTreeMap::new();
        for e in &entries {
            if let Some(r) = e.exclusion_reason {
                let key = serde_json::to_value(r).map_err(renalseq_core::Error::from)?;
                *excluded
                    .entry(key.as_str().unwrap_or_default().to_string())
                    .or_default() += 1;
            }
            if let (Some(s), Some(l)) = (e.split, e.label) {
                splits.entry(s.as_str().to_string()).or_default()[usize::from(l)] += 1;
            }
        }
        let eligible = entries.iter().filter(|e| e.is_eligible()).count();
        let positives = entries.iter().filter(|e| e.label == Some(1)).count();
        let deceased_eligible = entries
            .iter()
            .filter(|e| e.is_eligible())
            .filter(|e| {
                timelines
                    .get(&e.patient_id)
                    .is_some_and(|t| t.demographics.death_date.is_some())
            })
            .count();
        self.finish(
            run,
            json!({
                "patients": entries.len(),
                "eligible": eligible,
                "positives": positives,
                "deceased_eligible": deceased_eligible,
                "excluded": excluded,
                "split_label_counts": splits,
                "discarded_lab_events": labs.discarded,
                "orphan_lab_events": timelines.orphan_events,
                "out_of_range_lab_events": timelines.out_of_range_events,
            }),
        )
    }

    pub fn encode(&self) -> CliResult<StageManifest> {
        let (mut run, upstream) = self.begin(Stage::Encode)?;
        let vocab = self.cfg.vocabulary()?;
        let timelines = self.timelines(&mut run, upstream.get(&Stage::Cohort))?;
        let entries = self.read_cohort(&mut run)?;
        let max_len = self.cfg.max_sequence_len;
        let encoded = encode_cohort(&timelines, &entries, &vocab, max_len)?;
        run.write(ENCODED, &jsonl(&encoded)?)?;
        run.write(
            ENCODING_MANIFEST,
            &to_json(&EncodingManifest::new(&vocab, max_len))?,
        )?;
        let windows: BTreeMap<&str, _> = entries
            .iter()
            .filter_map(|e| Some((e.patient_id.as_str(), e.window?)))
            .collect();
        let truncated = encoded
            .iter()
            .filter(|s| {
                let (Some(t), Some(w)) = (
                    timelines.get(&s.patient_id),
                    windows.get(s.patient_id.as_str()),
                ) else {
                    return false;
                };
                event_dates(t, w, &vocab).is_ok_and(|d| d.len() > max_len)
            })
            .count();
        let mean_len = encoded.iter().map(|s| s.valid_length as f64).sum::<f64>()
            / encoded.len().max(1) as f64;
        self.finish(
            run,
            json!({
                "sequences": encoded.len(),
                "truncated": truncated,
                "mean_valid_length": mean_len,
                "feature_width": vocab.feature_width(),
            }),
        )
    }

    pub fn train(&self) -> CliResult<StageManifest> {
        let (mut run, _) = self.begin(Stage::Train)?;
        let vocab_hash = self.cfg.vocabulary()?.hash();
        let em_bytes = run.read(ENCODING_MANIFEST)?;
        let em: Value = parse_json(&em_bytes, &run.path(ENCODING_MANIFEST))?;
        if em.get("vocabulary_hash").and_then(Value::as_str) != Some(vocab_hash.as_str()) {
            return Err(CliError::Stale(format!(
                "{ENCODING_MANIFEST} was encoded with a different marker vocabulary"
            )));
        }
        let data = self.read_encoded(&mut run)?;
        let cfg = self.cfg.train_config();
        let (checkpoint, history) = run_training(&data, &cfg, &vocab_hash)?;
        // the output location is not part of the result
        let mut recorded = value(&self.cfg)?;
        if let Some(map) = recorded.as_object_mut() {
            map.remove("out");
        }
        run.write(MODEL, checkpoint.to_json()?.as_bytes())?;
        run.write(HISTORY, &to_json(&history)?)?;
        self.finish(
            run,
            json!({
                "config": recorded,
                "seeds": {"master": self.cfg.seed, "train": cfg.seed},
                "epochs_run": history.epochs.len(),
                "best_epoch": history.best_epoch,
                "best_validation_auc": history.best_validation_auc,
                "stop_reason": history.stop_reason,
                "parameters": checkpoint.params.num_params(),
            }),
        )
    }

    pub fn eval(&self) -> CliResult<StageManifest> {
        let (mut run, _) = self.begin(Stage::Eval)?;
        let checkpoint = self.read_model(&mut run)?;
        let data = self.read_encoded(&mut run)?;
        let test = split_of(&data, Split::Test);
        let scored = scored_set(&checkpoint.params, &test)?;
        let seed = self.cfg.stage_seed("eval");
        let resamples = self.cfg.bootstrap_resamples;
        let curve = roc_points(&scored)?;
        let ci = bootstrap_auc_ci(&scored, resamples, seed)?;
        let cm = confusion_at(&scored, self.cfg.decision_threshold, resamples, seed)?;

        let train = split_of(&data, Split::Train);
        let baseline = LastEventLogistic::fit(&train, DEFAULT_RIDGE)?;
        let baseline_scores = ScoredSet::from_scores(
            test.iter().map(|s| baseline.predict(s)).collect(),
            scored.labels.clone(),
        )?;
        let bayes_auc = if self.cfg.uses_synthetic_data() {
            let law: LatentLaw = {
                let m = crate::manifest::load_manifest(&self.out, Stage::Synth)?;
                serde_json::from_value(m.summary["law"].clone())
                    .map_err(|e| CliError::invalid(&run.path(Stage::Synth.manifest_file()), e))?
            };
            let truth_bytes = run.read(TRUTH)?;
            let truth = SynthTruth::read_jsonl(truth_bytes.as_slice(), law)?;
            let entries = self.read_cohort(&mut run)?;
            let bayes = bayes_scores(&truth, &entries)?;
            let scores = test
                .iter()
                .map(|s| {
                    bayes.get(&s.patient_id).copied().ok_or_else(|| {
                        CliError::Core(renalseq_core::Error::UnknownPatient(s.patient_id.clone()))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            auc_or_null(&ScoredSet::from_scores(scores, scored.labels.clone())?)
        } else {
            Value::Null
        };

        let rows = scored
            .patient_ids
            .iter()
            .zip(&scored.labels)
            .zip(&scored.scores)
            .map(|((id, l), s)| (id.as_str(), *l, *s));
        run.write(SCORES, &csv_bytes(&["patient_id", "label", "score"], rows)?)?;
        run.write(
            ROC,
            &csv_bytes(
                &["threshold", "fpr", "tpr"],
                curve.points.iter().map(|p| (p.threshold, p.fpr, p.tpr)),
            )?,
        )?;
        run.write(CONFUSION, &to_json(&cm)?)?;
        let metrics = json!({
            "n_test": scored.len(),
            "positives": scored.positives(),
            "auc": ci.point,
            "ci": {"level": 0.95, "lo": ci.lo, "hi": ci.hi},
            "resamples": ci.resamples,
            "skipped_resamples": ci.skipped,
            "confusion": cm,
            "baseline_auc": auc_or_null(&baseline_scores),
            "bayes_auc": bayes_auc,
        });
        run.write(METRICS, &to_json(&metrics)?)?;
        self.finish(run, metrics)
    }

    pub fn tsne(&self) -> CliResult<StageManifest> {
        let (mut run, _) = self.begin(Stage::Tsne)?;
        let checkpoint = self.read_model(&mut run)?;
        let data = self.read_encoded(&mut run)?;
        let test = split_of(&data, Split::Test);
        let embeddings = test
            .iter()
            .map(|s| gru::embed(&checkpoint.params, &s.input()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = run_tsne(&embeddings, &self.cfg.tsne_config())?;
        let ids: Vec<String> = test.iter().map(|s| s.patient_id.clone()).collect();
        let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
        let embedding = Embedding2D::new(&ids, &labels, &out.coords)?;
        run.write(
            TSNE,
            &csv_bytes(
                &["patient_id", "y1", "y2", "label"],
                embedding
                    .points
                    .iter()
                    .map(|p| (p.patient_id.as_str(), p.y1, p.y2, p.label)),
            )?,
        )?;
        run.write(
            KL_TRACE,
            &csv_bytes(
                &["iteration", "kl"],
                out.kl_trace.iter().map(|r| (r.iteration, r.kl)),
            )?,
        )?;
        self.finish(
            run,
            json!({
                "points": embedding.points.len(),
                "perplexity": out.perplexity,
                "final_kl": out.kl_trace.last().map(|r| r.kl),
            }),
        )
    }

    pub fn report(&self) -> CliResult<StageManifest> {
        let (mut run, _) = self.begin(Stage::Report)?;
        let roc_rows: Vec<(f64, f64, f64)> = parse_csv(&run.read(ROC)?, &run.path(ROC))?;
        let metrics: Value = parse_json(&run.read(METRICS)?, &run.path(METRICS))?;
        let cm: ConfusionMatrix = parse_json(&run.read(CONFUSION)?, &run.path(CONFUSION))?;
        let tsne_rows: Vec<(String, f64, f64, u8)> = parse_csv(&run.read(TSNE)?, &run.path(TSNE))?;
        let entries = self.read_cohort(&mut run)?;
        let cohort_manifest = crate::manifest::load_manifest(&self.out, Stage::Cohort)?;
        let timelines = self.timelines(&mut run, Some(&cohort_manifest))?;

        let auc = metrics["auc"].as_f64().unwrap_or(f64::NAN);
        let ci = (
            metrics["ci"]["lo"].as_f64().unwrap_or(f64::NAN),
            metrics["ci"]["hi"].as_f64().unwrap_or(f64::NAN),
        );
        let roc_pts: Vec<(f64, f64)> = roc_rows.iter().map(|r| (r.1, r.2)).collect();
        run.write("roc.svg", svg::roc(&roc_pts, auc, ci).as_bytes())?;
        run.write("confusion.svg", svg::confusion(&cm).as_bytes())?;
        let pts: Vec<(f64, f64, u8)> = tsne_rows.iter().map(|r| (r.1, r.2, r.3)).collect();
        run.write("tsne.svg", svg::tsne(&pts).as_bytes())?;

        let mut eligible: Vec<&CohortEntry> = entries.iter().filter(|e| e.is_eligible()).collect();
        eligible.shuffle(&mut rng::seeded(self.cfg.stage_seed("report")));
        eligible.truncate(self.cfg.report_timeline_patients);
        eligible.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let rows = eligible
            .iter()
            .filter_map(|e| {
                let t = timelines.get(&e.patient_id)?;
                let mut lab_dates: Vec<_> = t.events().iter().map(|ev| ev.date).collect();
                lab_dates.dedup();
                Some(svg::TimelineRow {
                    patient_id: e.patient_id.clone(),
                    label: e.label?,
                    lab_dates,
                    window: e.window?,
                })
            })
            .collect::<Vec<_>>();
        run.write("timeline.svg", svg::timeline(&rows).as_bytes())?;
        self.finish(
            run,
            json!({
                "roc_points": roc_pts.len(),
                "timeline_patients": rows.iter().map(|r| r.patient_id.clone()).collect::<Vec<_>>(),
                "tsne_points": pts.len(),
            }),
        )
    }
}
