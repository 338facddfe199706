//! Flat TOML run configuration. Every key is optional; `print-config` shows
//! the defaults.

use std::path::{Path, PathBuf};

use renalseq_core::cohort::{CohortRules, MIN_PRE_WINDOW_DAYS, WINDOW_DAYS};
use renalseq_core::encode::MAX_SEQUENCE_LEN;
use renalseq_core::eval::{BOOTSTRAP_RESAMPLES, DECISION_THRESHOLD};
use renalseq_core::rng::derive_seed;
use renalseq_core::vocab::{MarkerVocabulary, CREATININE, DEFAULT_MARKERS};
use renalseq_core::{SplitFractions, SynthConfig, TrainConfig, TsneConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Real-format inputs; when both are empty, `run-all` synthesizes them.
    pub patients: String,
    pub labs: String,

    pub markers: Vec<String>,
    pub creatinine: String,
    pub window_days: u64,
    pub min_pre_window_days: usize,
    pub max_sequence_len: usize,
    pub split_train: f64,
    pub split_validation: f64,
    pub split_test: f64,

    pub synth_n_patients: usize,
    pub synth_baseline_mean: f64,
    pub synth_baseline_sd: f64,
    pub synth_severity_drift: f64,
    pub synth_severity_reversion: f64,
    pub synth_visit_gap_days: f64,
    pub synth_long_follow_up_fraction: f64,
    pub synth_death_hazard_scale: f64,
    pub synth_death_lag_days: f64,
    /// Multiplies every marker's coupling to severity; 0 removes all signal.
    pub synth_informativeness_scale: f64,
    pub synth_oracle_samples: usize,

    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,

    pub bootstrap_resamples: usize,
    pub decision_threshold: f64,

    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_exaggeration: f64,
    pub tsne_exaggeration_iterations: usize,
    pub tsne_learning_rate: f64,
    pub tsne_momentum: f64,
    pub tsne_final_momentum: f64,

    pub report_timeline_patients: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let tsne = TsneConfig::default();
        let split = SplitFractions::default();
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            patients: String::new(),
            labs: String::new(),
            markers: DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect(),
            creatinine: CREATININE.into(),
            window_days: WINDOW_DAYS,
            min_pre_window_days: MIN_PRE_WINDOW_DAYS,
            max_sequence_len: MAX_SEQUENCE_LEN,
            split_train: split.train,
            split_validation: split.validation,
            split_test: split.test,
            synth_n_patients: synth.n_patients,
            synth_baseline_mean: synth.baseline_mean,
            synth_baseline_sd: synth.baseline_sd,
            synth_severity_drift: synth.severity_drift,
            synth_severity_reversion: synth.severity_reversion,
            synth_visit_gap_days: synth.visit_gap_days,
            synth_long_follow_up_fraction: synth.long_follow_up_fraction,
            synth_death_hazard_scale: synth.death_hazard_scale,
            synth_death_lag_days: synth.death_lag_days,
            synth_informativeness_scale: 1.0,
            synth_oracle_samples: synth.oracle_samples,
            hidden_dim: train.hidden_dim,
            learning_rate: train.learning_rate,
            adam_beta1: train.beta1,
            adam_beta2: train.beta2,
            adam_epsilon: train.epsilon,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            min_improvement: train.min_improvement,
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            decision_threshold: DECISION_THRESHOLD,
            tsne_perplexity: tsne.perplexity,
            tsne_iterations: tsne.iterations,
            tsne_exaggeration: tsne.exaggeration,
            tsne_exaggeration_iterations: tsne.exaggeration_iterations,
            tsne_learning_rate: tsne.learning_rate,
            tsne_momentum: tsne.momentum,
            tsne_final_momentum: tsne.final_momentum,
            report_timeline_patients: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.vocabulary()?;
        self.split_fractions()?;
        self.synth_config().validate()?;
        self.train_config().validate()?;
        if self.window_days == 0 || self.min_pre_window_days == 0 || self.max_sequence_len == 0 {
            return Err(CliError::Config(
                "window_days, min_pre_window_days and max_sequence_len must be positive".into(),
            ));
        }
        if self.bootstrap_resamples == 0 {
            return Err(CliError::Config(
                "bootstrap_resamples must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(CliError::Config(
                "decision_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.tsne_iterations < self.tsne_exaggeration_iterations || self.tsne_perplexity < 1.0 {
            return Err(CliError::Config(
                "tsne_iterations must cover the exaggeration phase and tsne_perplexity be at least 1"
                    .into(),
            ));
        }
        if self.patients.is_empty() != self.labs.is_empty() {
            return Err(CliError::Config(
                "set both patients and labs, or neither".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_synthetic_data(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn vocabulary(&self) -> CliResult<MarkerVocabulary> {
        Ok(MarkerVocabulary::new(
            self.markers.clone(),
            &self.creatinine,
        )?)
    }

    pub fn cohort_rules(&self) -> CohortRules {
        CohortRules {
            window_days: self.window_days,
            min_pre_window_days: self.min_pre_window_days,
        }
    }

    /// Each split must be non-empty: training, model selection and
    /// evaluation all need data.
    pub fn split_fractions(&self) -> CliResult<SplitFractions> {
        let f = SplitFractions {
            train: self.split_train,
            validation: self.split_validation,
            test: self.split_test,
        };
        f.validate()?;
        if f.as_array().iter().any(|&x| x <= 0.0) {
            return Err(CliError::Config(format!(
                "every split fraction must be positive, got ({}, {}, {})",
                f.train, f.validation, f.test
            )));
        }
        Ok(f)
    }

    pub fn synth_config(&self) -> SynthConfig {
        let base = SynthConfig::default();
        SynthConfig {
            n_patients: self.synth_n_patients,
            seed: self.stage_seed("synth"),
            window_days: self.window_days,
            baseline_mean: self.synth_baseline_mean,
            baseline_sd: self.synth_baseline_sd,
            severity_drift: self.synth_severity_drift,
            severity_reversion: self.synth_severity_reversion,
            visit_gap_days: self.synth_visit_gap_days,
            long_follow_up_fraction: self.synth_long_follow_up_fraction,
            death_hazard_scale: self.synth_death_hazard_scale,
            death_lag_days: self.synth_death_lag_days,
            oracle_samples: self.synth_oracle_samples,
            ..base
        }
        .scale_signal(self.synth_informativeness_scale)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden_dim: self.hidden_dim,
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_improvement: self.min_improvement,
            seed: self.stage_seed("train"),
        }
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            exaggeration: self.tsne_exaggeration,
            exaggeration_iterations: self.tsne_exaggeration_iterations,
            learning_rate: self.tsne_learning_rate,
            momentum: self.tsne_momentum,
            final_momentum: self.tsne_final_momentum,
            seed: self.stage_seed("tsne"),
            ..TsneConfig::default()
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}
