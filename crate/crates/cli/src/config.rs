//! JSON configuration: defaults for every field, strict unknown-key
//! rejection, and validation that names the offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use advloop_core::agents::{ConstraintDefaults, MethodParams, StrategistConfig};
use advloop_core::attacks::{CwParams, JsmaParams, StaParams};
use advloop_core::metrics::SsimConfig;
use advloop_core::mixer::MixerConfig;
use advloop_core::models::{DatasetSpec, TrainConfig};
use advloop_core::orchestrator::{AblationMode, Mode, RunConfig};
use advloop_core::Error;

/// Image geometry shared by the dataset, models, and attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        ImageSection {
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

/// Synthetic dataset sizing and generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub base_freq: (f64, f64),
    pub artifact_freq: (f64, f64),
    pub artifact_amp: (f64, f64),
    pub ridge_amp: (f64, f64),
    pub ridge_sigma: f64,
    pub noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let spec = DatasetSpec::new(3, 32, 32, 2, 0);
        DatasetSection {
            train_samples: 160,
            holdout_samples: 40,
            base_freq: spec.base_freq,
            artifact_freq: spec.artifact_freq,
            artifact_amp: spec.artifact_amp,
            ridge_amp: spec.ridge_amp,
            ridge_sigma: spec.ridge_sigma,
            noise: spec.noise,
        }
    }
}

/// Trainer settings for all three models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub input_noise: f64,
    pub class_weights: [f64; 2],
}

impl Default for TrainingSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        TrainingSection {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            input_noise: cfg.input_noise,
            class_weights: cfg.class_weights,
        }
    }
}

/// Loop-level settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub max_iterations: usize,
    pub max_blind_queries: u64,
    pub success_threshold: f64,
    pub eps: f64,
    pub tau: f64,
    pub target: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let run = RunConfig::default();
        RunSection {
            mode: run.mode,
            max_iterations: run.max_iterations,
            max_blind_queries: run.max_blind_queries,
            success_threshold: run.success_threshold,
            eps: run.defaults.eps,
            tau: run.defaults.tau,
            target: run.defaults.target,
        }
    }
}

/// The full configuration file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullConfig {
    pub image: ImageSection,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub run: RunSection,
    pub cw: CwParams,
    pub jsma: JsmaParams,
    pub sta: StaParams,
    pub mixer: MixerConfig,
    pub strategist: StrategistConfig,
}

impl FullConfig {
    /// Loads and validates a config file; an empty JSON object yields the
    /// full default configuration.
    pub fn load(path: &Path) -> Result<FullConfig, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("config {}: {e}", path.display()))
        })?;
        let config: FullConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        let fail = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if self.image.channels != 1 && self.image.channels != 3 {
            return fail("image.channels", format!("{} not in {{1, 3}}", self.image.channels));
        }
        if self.image.height < 8 || self.image.width < 8 {
            return fail(
                "image.height/width",
                format!("{}x{} below the 8x8 minimum", self.image.height, self.image.width),
            );
        }
        if self.dataset.train_samples == 0 || !self.dataset.train_samples.is_multiple_of(2) {
            return fail(
                "dataset.train_samples",
                format!("{} must be positive and even", self.dataset.train_samples),
            );
        }
        if !self.dataset.holdout_samples.is_multiple_of(2) {
            return fail(
                "dataset.holdout_samples",
                format!("{} must be even", self.dataset.holdout_samples),
            );
        }
        if !(self.run.eps > 0.0 && self.run.eps <= 1.0) {
            return fail("run.eps", format!("{} outside (0, 1]", self.run.eps));
        }
        if !(0.0..=1.0).contains(&self.run.tau) {
            return fail("run.tau", format!("{} outside [0, 1]", self.run.tau));
        }
        if !(0.0..=1.0).contains(&self.run.success_threshold) {
            return fail(
                "run.success_threshold",
                format!("{} outside [0, 1]", self.run.success_threshold),
            );
        }
        if self.run.target > 1 {
            return fail("run.target", format!("{} not a binary class", self.run.target));
        }
        if self.run.max_blind_queries == 0 {
            return fail("run.max_blind_queries", "must be positive".into());
        }
        self.cw.validate().map_err(prefix("cw"))?;
        self.jsma.validate().map_err(prefix("jsma"))?;
        self.sta.validate().map_err(prefix("sta"))?;
        self.mixer.validate().map_err(prefix("mixer"))?;
        self.strategist.validate().map_err(prefix("strategist"))?;
        if self.training.learning_rate <= 0.0 {
            return fail(
                "training.learning_rate",
                format!("{} must be positive", self.training.learning_rate),
            );
        }
        if self.training.batch_size == 0 {
            return fail("training.batch_size", "must be positive".into());
        }
        Ok(())
    }

    /// The dataset generator spec for a given seed; total samples cover the
    /// train/holdout split.
    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            channels: self.image.channels,
            height: self.image.height,
            width: self.image.width,
            samples: self.dataset.train_samples + self.dataset.holdout_samples,
            seed,
            base_freq: self.dataset.base_freq,
            artifact_freq: self.dataset.artifact_freq,
            artifact_amp: self.dataset.artifact_amp,
            ridge_amp: self.dataset.ridge_amp,
            ridge_sigma: self.dataset.ridge_sigma,
            noise: self.dataset.noise,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            momentum: self.training.momentum,
            input_noise: self.training.input_noise,
            class_weights: self.training.class_weights,
            seed,
        }
    }

    /// The orchestrator configuration for one run.
    pub fn run_config(
        &self,
        ablation: AblationMode,
        single_method: Option<advloop_core::attacks::AttackMethod>,
        seed: u64,
        max_queries_override: Option<u64>,
    ) -> RunConfig {
        RunConfig {
            mode: self.run.mode,
            ablation,
            single_method,
            max_iterations: self.run.max_iterations,
            max_blind_queries: max_queries_override.unwrap_or(self.run.max_blind_queries),
            success_threshold: self.run.success_threshold,
            defaults: ConstraintDefaults {
                eps: self.run.eps,
                tau: self.run.tau,
                target: self.run.target,
            },
            mixer: self.mixer.clone(),
            strategist: self.strategist.clone(),
            methods: MethodParams {
                cw: self.cw.clone(),
                jsma: self.jsma.clone(),
                sta: self.sta.clone(),
            },
            ssim: SsimConfig::default(),
            seed,
        }
    }
}

fn prefix(key: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("{key}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        let parsed: FullConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, FullConfig::default());
        assert!(parsed.validate().is_ok());
    }

    #[test]
    fn out_of_range_eps_names_the_key() {
        let parsed: FullConfig =
            serde_json::from_str(r#"{"run": {"eps": 2.0}}"#).unwrap();
        let err = parsed.validate().unwrap_err().to_string();
        assert!(err.contains("run.eps"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<FullConfig>(r#"{"runn": {}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<FullConfig>(r#"{"run": {"epsx": 0.1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn save_load_round_trips() {
        let dir = std::env::temp_dir().join("advloop-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        let mut config = FullConfig::default();
        config.run.eps = 12.0 / 255.0;
        config.mixer.hill_iters = 123;
        config.save(&path).unwrap();
        let loaded = FullConfig::load(&path).unwrap();
        assert_eq!(config, loaded);
        std::fs::remove_file(&path).ok();
    }
}
