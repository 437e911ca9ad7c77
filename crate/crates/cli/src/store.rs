use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smlab_core::experiment::{CheckpointEval, ExperimentError, TrialResult, TrialStore};
use smlab_core::model::{load_checkpoint, write_checkpoint, EncoderModel};
use smlab_core::numkernel::AdamState;

use crate::config::RunConfig;
use crate::{io_err, CliError};

#[derive(Serialize, Deserialize)]
struct StoredTrial {
    key: String,
    trial: TrialResult,
}

/// Keeps each trial's progress as `trials/trial-<seed>.json` next to its
/// latest model in `checkpoints/`, so an interrupted experiment resumes at
/// the last evaluated checkpoint.
#[derive(Clone, Debug)]
pub struct RunStore {
    out: PathBuf,
    key: String,
    single_trial: bool,
    per_epoch: bool,
    quiet: bool,
}

impl RunStore {
    /// `single_trial` selects the layout of the `train` command, which
    /// never resumes.
    pub fn new(config: &RunConfig, single_trial: bool) -> Result<Self, CliError> {
        let out = config.out.clone();
        fs::create_dir_all(out.join("checkpoints")).map_err(io_err(&out))?;
        if !single_trial {
            fs::create_dir_all(out.join("trials")).map_err(io_err(&out))?;
        }
        Ok(Self {
            out,
            key: config.trial_key(),
            single_trial,
            per_epoch: config.train.save_checkpoints,
            quiet: false,
        })
    }

    pub fn quiet(mut self) -> Self {
        self.quiet = true;
        self
    }

    pub fn trial_path(&self, seed: u64) -> PathBuf {
        self.out.join("trials").join(format!("trial-{seed}.json"))
    }

    /// The latest model of a trial.
    pub fn model_path(&self, seed: u64) -> PathBuf {
        let name = if self.single_trial {
            "model.ckpt".to_string()
        } else {
            format!("trial-{seed}.ckpt")
        };
        self.out.join("checkpoints").join(name)
    }

    fn epoch_model_path(&self, seed: u64, epoch: usize) -> PathBuf {
        let name = if self.single_trial {
            format!("epoch-{epoch:04}.ckpt")
        } else {
            format!("trial-{seed}-epoch-{epoch:04}.ckpt")
        };
        self.out.join("checkpoints").join(name)
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

impl TrialStore for RunStore {
    fn load(&self, seed: u64) -> Option<TrialResult> {
        if self.single_trial {
            return None;
        }
        let text = fs::read_to_string(self.trial_path(seed)).ok()?;
        let stored: StoredTrial = serde_json::from_str(&text).ok()?;
        (stored.key == self.key && stored.trial.seed == seed).then_some(stored.trial)
    }

    fn load_model(&self, seed: u64) -> Option<(EncoderModel, AdamState)> {
        if self.single_trial {
            return None;
        }
        load_checkpoint(&self.model_path(seed)).ok()
    }

    fn store(&self, progress: &TrialResult, model: &EncoderModel, adam: &AdamState) -> Result<(), ExperimentError> {
        let bytes = write_checkpoint(model, adam)?;
        write_atomic(&self.model_path(progress.seed), &bytes)?;
        if self.per_epoch {
            write_atomic(&self.epoch_model_path(progress.seed, progress.trained_epochs), &bytes)?;
        }
        if self.single_trial {
            return Ok(());
        }
        let stored = StoredTrial {
            key: self.key.clone(),
            trial: progress.clone(),
        };
        let json = serde_json::to_vec_pretty(&stored).map_err(std::io::Error::other)?;
        write_atomic(&self.trial_path(progress.seed), &json)?;
        Ok(())
    }

    fn progress(&self, seed: u64, eval: &CheckpointEval) {
        if self.quiet {
            return;
        }
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "trial {seed} epoch {:>4}  i {}  ii {}  iii {}  loss {:.4}",
            eval.epoch,
            f(eval.accuracy[0]),
            f(eval.accuracy[1]),
            f(eval.accuracy[2]),
            eval.train_loss
        );
    }
}
