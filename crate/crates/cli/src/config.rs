use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smlab_core::experiment::{CheckpointSchedule, PhaseThresholds, TrainConfig, N_TRIALS};
use smlab_core::model::ModelConfig;
use smlab_core::scenario::ScenarioConfig;

use crate::CliError;

/// Everything a command needs. `seed` is the only source of randomness:
/// trial `i` uses `seed + i` for its split and derives model-init, masking
/// and shuffling streams from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_trials: usize,
    pub workers: usize,
    pub out: PathBuf,
    /// Scenario file to load; resolved into `scenario` before a run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_file: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phases: PhaseThresholds,
    pub scenario: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_trials: N_TRIALS,
            workers: 1,
            out: PathBuf::from("runs/experiment"),
            scenario_file: None,
            model: ModelConfig::default(),
            train: TrainConfig {
                lr: 1e-4,
                ..TrainConfig::default()
            },
            phases: PhaseThresholds::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub workers: Option<usize>,
    pub schedule: Option<String>,
    pub remask_per_epoch: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(file) = &config.scenario_file {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.scenario_file = Some(base.join(file));
            }
        }
        Ok(config)
    }

    /// Applies overrides, loads the scenario file and fills derived fields.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(workers) = o.workers {
            self.workers = workers;
        }
        if let Some(text) = &o.schedule {
            self.train.schedule = CheckpointSchedule::parse(text)?;
        }
        if let Some(epochs) = o.epochs {
            self.train.schedule = self.train.schedule.truncated(epochs)?;
        }
        if o.remask_per_epoch {
            self.train.remask_per_epoch = true;
        }
        if let Some(file) = self.scenario_file.take() {
            self.scenario = ScenarioConfig::load(&file)?;
        }
        self.scenario.validate()?;
        self.model.vocab_size = smlab_core::scenario::build_vocabulary(&self.scenario).len();
        self.model.validate()?;
        self.train.validate()?;
        if self.n_trials == 0 {
            return Err(CliError::Config("n_trials must be at least 1".into()));
        }
        self.workers = self.workers.max(1);
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Hash of everything that affects trial results.
    /// Hash of everything a trial's progress depends on. The schedule and
    /// stopping rule only decide how far training goes, so they are left out.
    pub fn trial_key(&self) -> String {
        let mut train = serde_json::to_value(&self.train).expect("train config serializes");
        if let Some(fields) = train.as_object_mut() {
            for name in ["schedule", "early_exit", "early_exit_accuracy", "early_exit_checkpoints", "save_checkpoints"] {
                fields.remove(name);
            }
        }
        let json = serde_json::json!({
            "model": self.model,
            "train": train,
            "scenario": self.scenario,
        });
        smlab_core::scenario::short_hash(json.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = RunConfig::default().resolve(&Overrides::default()).unwrap();
        let back: RunConfig = toml::from_str(&config.to_toml().unwrap()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn overrides_take_precedence() {
        let o = Overrides {
            seed: Some(9),
            epochs: Some(20),
            workers: Some(0),
            remask_per_epoch: true,
            ..Overrides::default()
        };
        let config = RunConfig::default().resolve(&o).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.workers, 1);
        assert!(config.train.remask_per_epoch);
        assert_eq!(config.train.schedule.epochs(), &[1, 2, 4, 8, 10, 16, 20]);

        let o = Overrides {
            schedule: Some("3,5".into()),
            ..Overrides::default()
        };
        assert_eq!(RunConfig::default().resolve(&o).unwrap().train.schedule.epochs(), &[3, 5]);
    }

    #[test]
    fn trial_key_ignores_output_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.workers = 4;
        b.seed = 3;
        assert_eq!(a.trial_key(), b.trial_key());
        b.train.early_exit = false;
        b.train.schedule = smlab_core::experiment::CheckpointSchedule::new(vec![1, 2]).unwrap();
        assert_eq!(a.trial_key(), b.trial_key());
        b.train.lr = 3e-4;
        assert_ne!(a.trial_key(), b.trial_key());
    }

    #[test]
    fn unknown_keys_and_relative_scenario_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sed = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));

        std::fs::write(dir.path().join("world.toml"), ScenarioConfig::default().to_toml_string()).unwrap();
        std::fs::write(&path, "scenario_file = \"world.toml\"\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.scenario_file.as_deref(), Some(dir.path().join("world.toml").as_path()));
        let resolved = config.resolve(&Overrides::default()).unwrap();
        assert_eq!(resolved.scenario, ScenarioConfig::default());
        assert!(resolved.scenario_file.is_none());
    }
}
