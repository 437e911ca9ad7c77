//! Commands behind the `smlab` binary: dataset generation, single-trial
//! training, the repeated-holdout experiment, checkpoint probing and curve
//! plotting. Each command writes its resolved configuration next to its
//! outputs.

pub mod config;
mod probe;
mod store;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use smlab_core::experiment::{
    confusion_csv, curves_csv, detect_phases, phase_report_toml, question_type_ratio, run_holdout, run_trial, svg_plot,
    ExperimentError, HoldoutResult, LearningCurve, PhaseReport, TrialResult, TypeRatio,
};
use smlab_core::model::ModelError;
use smlab_core::scenario::{save_dataset, DatasetHeader, ParticleCounts, Scenario, ScenarioError};

pub use config::{Overrides, RunConfig};
pub use probe::{probe, MaskSpec, ProbeReport};
pub use store::RunStore;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("experiment: {0}")]
    Experiment(#[from] ExperimentError),
    #[error("probe: {0}")]
    Probe(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn persist_config(config: &RunConfig) -> Result<(), CliError> {
    write_file(&config.out.join("config.toml"), &config.to_toml()?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniverseStats {
    pub fingerprint: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub sense_states: usize,
    pub universe_size: usize,
    pub two_utterance_chunks: usize,
    pub ne_final: usize,
    pub yo_final: usize,
    pub ne_to_yo: f64,
    pub sample: usize,
    pub train: usize,
    pub test: usize,
}

/// Writes `stats.toml`, `sample.jsonl`, `train.jsonl` and `test.jsonl`.
pub fn generate(config: &RunConfig) -> Result<UniverseStats, CliError> {
    let scenario = Scenario::new(config.scenario.clone())?;
    let split = scenario.sample_split(config.seed)?;
    let counts: ParticleCounts = scenario.particle_counts();
    let stats = UniverseStats {
        fingerprint: scenario.fingerprint().to_string(),
        seed: config.seed,
        vocab_size: scenario.vocab().len(),
        sense_states: scenario.sense_states().len(),
        universe_size: scenario.universe().len(),
        two_utterance_chunks: scenario.universe().iter().filter(|c| c.has_two_utterances()).count(),
        ne_final: counts.ne,
        yo_final: counts.yo,
        ne_to_yo: counts.ne_to_yo(),
        sample: split.sample.len(),
        train: split.train.len(),
        test: split.test.len(),
    };
    let out = &config.out;
    for (role, chunks) in [("sample", &split.sample), ("train", &split.train), ("test", &split.test)] {
        let header = DatasetHeader {
            role: role.to_string(),
            seed: config.seed,
            fingerprint: scenario.fingerprint().to_string(),
        };
        fs::create_dir_all(out).map_err(io_err(out))?;
        save_dataset(&out.join(format!("{role}.jsonl")), &header, chunks)?;
    }
    let text = toml::to_string(&stats).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("stats.toml"), &text)?;
    persist_config(config)?;
    Ok(stats)
}

/// One training trial with seed `config.seed`. Writes `curve.csv`,
/// `confusion.csv`, `trial.json` and checkpoints under `checkpoints/`.
pub fn train(config: &RunConfig) -> Result<TrialResult, CliError> {
    let scenario = Scenario::new(config.scenario.clone())?;
    persist_config(config)?;
    let store = RunStore::new(config, true)?;
    let trial = run_trial(&scenario, &config.model, &config.train, config.seed, &store)?;
    let result = HoldoutResult {
        curve: LearningCurve::from_trials(std::slice::from_ref(&trial))?,
        trials: vec![trial.clone()],
    };
    write_file(&config.out.join("curve.csv"), &curves_csv(&result, config.seed, scenario.fingerprint()))?;
    write_file(&config.out.join("confusion.csv"), &confusion_csv(&scenario, &result, config.seed))?;
    let json = serde_json::to_string_pretty(&trial).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&config.out.join("trial.json"), &json)?;
    Ok(trial)
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub result: HoldoutResult,
    /// `None` when the schedule has too few checkpoints to analyse.
    pub report: Option<PhaseReport>,
    pub ratio: TypeRatio,
}

impl ExperimentSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let r = self.ratio.normalized();
        let _ = writeln!(
            s,
            "question types i:ii:iii = {}:{}:{} ({:.2}:{:.2}:{:.2})",
            self.ratio.counts[0], self.ratio.counts[1], self.ratio.counts[2], r[0], r[1], r[2]
        );
        let _ = writeln!(s, "epoch   type_i  type_ii type_iii");
        for (epoch, acc) in self.result.curve.mean_points() {
            let f = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{v:>7.3}"));
            let _ = writeln!(s, "{epoch:>5} {}  {}  {}", f(acc[0]), f(acc[1]), f(acc[2]));
        }
        let Some(report) = &self.report else {
            let _ = writeln!(s, "phase detection skipped: too few checkpoints");
            return s;
        };
        match report.phase_one_epoch {
            Some(e) => {
                let _ = writeln!(s, "phase I (ne everywhere) first seen at epoch {e}");
            }
            None => {
                let _ = writeln!(s, "phase I not observed");
            }
        }
        match &report.u_shape {
            Some(u) => {
                let _ = writeln!(
                    s,
                    "type ii U-shape: {:.3} at {} -> {:.3} at {} -> recovered at {}",
                    u.peak, u.peak_epoch, u.trough, u.trough_epoch, u.recovery_epoch
                );
            }
            None => {
                let _ = writeln!(s, "no type ii U-shape");
            }
        }
        s
    }
}

/// The repeated-holdout experiment. Trial progress stored in `out/` with a
/// matching configuration is picked up where it stopped.
pub fn experiment(config: &RunConfig) -> Result<ExperimentSummary, CliError> {
    experiment_with(config, &RunStore::new(config, false)?)
}

pub fn experiment_with(config: &RunConfig, store: &RunStore) -> Result<ExperimentSummary, CliError> {
    let scenario = Scenario::new(config.scenario.clone())?;
    persist_config(config)?;
    let result = run_holdout(
        &scenario,
        &config.model,
        &config.train,
        config.seed,
        config.n_trials,
        config.workers,
        store,
    )?;
    let seeds = result.trials.iter().map(|t| t.seed);
    let ratio = question_type_ratio(&scenario, seeds)?;
    let points = result.curve.mean_points();
    let report = match detect_phases(&points, config.phases) {
        Ok(r) => Some(r),
        Err(ExperimentError::TooFewCheckpoints(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let out = &config.out;
    let fp = scenario.fingerprint();
    write_file(&out.join("curves.csv"), &curves_csv(&result, config.seed, fp))?;
    write_file(&out.join("confusion.csv"), &confusion_csv(&scenario, &result, config.seed))?;
    if let Some(report) = &report {
        let phases =
            phase_report_toml(report, Some(&ratio), config.seed, fp).map_err(|e| CliError::Config(e.to_string()))?;
        write_file(&out.join("phases.toml"), &phases)?;
    }
    let title = format!("Mean correct response rate over {} trials", config.n_trials);
    write_file(&out.join("curves.svg"), &svg_plot(&points, &title))?;
    let summary = ExperimentSummary { result, report, ratio };
    write_file(&out.join("summary.txt"), &summary.render())?;
    Ok(summary)
}

/// Re-plots the `mean` rows of a curves CSV.
pub fn plot(input: &Path, output: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let mut points = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Plot(format!("expected 5 fields: {line:?}")));
        }
        if fields[1] != "mean" {
            continue;
        }
        let epoch = fields[0]
            .parse()
            .map_err(|_| CliError::Plot(format!("bad epoch in {line:?}")))?;
        let mut acc = [None; 3];
        for (slot, f) in acc.iter_mut().zip(&fields[2..]) {
            if !f.is_empty() {
                *slot = Some(f.parse().map_err(|_| CliError::Plot(format!("bad accuracy in {line:?}")))?);
            }
        }
        points.push((epoch, acc));
    }
    if points.is_empty() {
        return Err(CliError::Plot(format!("{} has no mean rows", input.display())));
    }
    write_file(output, &svg_plot(&points, "Mean correct response rate"))
}
