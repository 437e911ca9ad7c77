use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{build_questions, evaluate, type_counts, ConfusionRecord, ExperimentError, Question};
use crate::model::{init_model, train_step, EncoderModel, ModelConfig};
use crate::numkernel::{derive_seed, AdamConfig, AdamState, Rng};
use crate::scenario::{Chunk, MaskedExample, Scenario, MASKINGS_PER_CHUNK};

/// Streams split off a trial seed. The train/test split itself uses the
/// trial seed directly.
pub const INIT_STREAM: u64 = 1;
pub const MASKING_STREAM: u64 = 2;
pub const SHUFFLE_STREAM: u64 = 3;

/// Epochs after which the model is evaluated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CheckpointSchedule(Vec<usize>);

impl Default for CheckpointSchedule {
    /// Powers of two up to 4096 plus epoch 10.
    fn default() -> Self {
        let mut epochs: Vec<usize> = (0..=12).map(|k| 1 << k).collect();
        epochs.push(10);
        epochs.sort_unstable();
        Self(epochs)
    }
}

impl CheckpointSchedule {
    /// Strictly increasing positive epochs; must contain 8 when it runs
    /// past it.
    pub fn new(epochs: Vec<usize>) -> Result<Self, ExperimentError> {
        if epochs.is_empty() {
            return Err(ExperimentError::Schedule("empty schedule".into()));
        }
        if epochs[0] == 0 || epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::Schedule(format!("epochs must be positive and strictly increasing: {epochs:?}")));
        }
        if *epochs.last().unwrap() >= 8 && !epochs.contains(&8) {
            return Err(ExperimentError::Schedule("schedule must include epoch 8".into()));
        }
        Ok(Self(epochs))
    }

    /// Parses a comma-separated list such as `1,2,4,8`.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let epochs = text
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ExperimentError::Schedule(format!("{text:?}: {e}")))?;
        Self::new(epochs)
    }

    /// Drops checkpoints after `last` and makes `last` the final one.
    pub fn truncated(&self, last: usize) -> Result<Self, ExperimentError> {
        let mut epochs: Vec<usize> = self.0.iter().copied().filter(|&e| e < last).collect();
        epochs.push(last);
        Self::new(epochs)
    }

    pub fn epochs(&self) -> &[usize] {
        &self.0
    }

    pub fn final_epoch(&self) -> usize {
        *self.0.last().unwrap()
    }
}

impl TryFrom<Vec<usize>> for CheckpointSchedule {
    type Error = ExperimentError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<CheckpointSchedule> for Vec<usize> {
    fn from(s: CheckpointSchedule) -> Self {
        s.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: CheckpointSchedule,
    /// Draw fresh maskings every epoch instead of reusing the first set.
    pub remask_per_epoch: bool,
    /// Stop once every type of the trial-averaged curve reaches
    /// `early_exit_accuracy` at `early_exit_checkpoints` consecutive
    /// checkpoints.
    pub early_exit: bool,
    pub early_exit_accuracy: f64,
    pub early_exit_checkpoints: usize,
    /// Ask the store to keep a model for every scheduled epoch rather than
    /// only the latest one.
    pub save_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: AdamConfig::default().lr,
            batch_size: 64,
            schedule: CheckpointSchedule::default(),
            remask_per_epoch: false,
            early_exit: true,
            early_exit_accuracy: 0.95,
            early_exit_checkpoints: 2,
            save_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.batch_size == 0 {
            return Err(ExperimentError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ExperimentError::Config("lr must be positive".into()));
        }
        if self.early_exit_checkpoints == 0 {
            return Err(ExperimentError::Config("early_exit_checkpoints must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluation at one scheduled epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub epoch: usize,
    pub accuracy: [Option<f64>; 3],
    pub correct: [usize; 3],
    pub total: [usize; 3],
    pub confusion: ConfusionRecord,
    /// Mean training loss over the most recent epoch.
    pub train_loss: f64,
    /// Repeats the last evaluation after an early exit.
    pub carried: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub fingerprint: String,
    pub question_counts: [usize; 3],
    pub checkpoints: Vec<CheckpointEval>,
    /// Last epoch actually trained.
    pub trained_epochs: usize,
}

/// Persistence and progress hooks for [`run_holdout`]. A store that keeps
/// what it is given lets an interrupted experiment resume from the last
/// evaluated checkpoint of every trial.
pub trait TrialStore: Sync {
    /// Evaluations recorded so far for `seed` (never carried ones).
    fn load(&self, _seed: u64) -> Option<TrialResult> {
        None
    }

    /// Model and optimizer state after the last recorded evaluation.
    fn load_model(&self, _seed: u64) -> Option<(EncoderModel, AdamState)> {
        None
    }

    /// Called after every evaluation with the trial's progress so far.
    fn store(&self, _progress: &TrialResult, _model: &EncoderModel, _adam: &AdamState) -> Result<(), ExperimentError> {
        Ok(())
    }

    fn progress(&self, _seed: u64, _eval: &CheckpointEval) {}
}

/// Keeps nothing.
pub struct NoStore;

impl TrialStore for NoStore {}

fn stream(seed: u64, stream: u64, epoch: usize) -> Rng {
    Rng::new(derive_seed(derive_seed(seed, stream), epoch as u64))
}

/// One trial that can be advanced checkpoint by checkpoint.
struct Trial<'a> {
    scenario: &'a Scenario,
    model_config: ModelConfig,
    train: &'a TrainConfig,
    seed: u64,
    train_chunks: Vec<Chunk>,
    questions: Vec<Question>,
    progress: TrialResult,
    state: Option<(EncoderModel, AdamState)>,
    fixed_masks: Option<Vec<MaskedExample>>,
}

impl<'a> Trial<'a> {
    fn new(
        scenario: &'a Scenario,
        model_config: &ModelConfig,
        train: &'a TrainConfig,
        seed: u64,
        store: &dyn TrialStore,
    ) -> Result<Self, ExperimentError> {
        let split = scenario.sample_split(seed)?;
        let questions = build_questions(scenario, &split.test)?;
        let fresh = TrialResult {
            seed,
            fingerprint: scenario.fingerprint().to_string(),
            question_counts: type_counts(&questions),
            checkpoints: Vec::new(),
            trained_epochs: 0,
        };
        let schedule = train.schedule.epochs();
        let progress = match store.load(seed) {
            Some(p)
                if p.seed == fresh.seed
                    && p.fingerprint == fresh.fingerprint
                    && p.question_counts == fresh.question_counts
                    && p.checkpoints.len() <= schedule.len()
                    && p.checkpoints.iter().zip(schedule).all(|(c, &e)| c.epoch == e && !c.carried)
                    && p.trained_epochs == p.checkpoints.last().map_or(0, |c| c.epoch) =>
            {
                p
            }
            _ => fresh,
        };
        Ok(Self {
            scenario,
            model_config: ModelConfig {
                seed: derive_seed(seed, INIT_STREAM),
                vocab_size: scenario.vocab().len(),
                ..model_config.clone()
            },
            train,
            seed,
            train_chunks: split.train,
            questions,
            progress,
            state: None,
            fixed_masks: None,
        })
    }

    fn steps_per_epoch(&self) -> u64 {
        (self.train_chunks.len() * MASKINGS_PER_CHUNK).div_ceil(self.train.batch_size) as u64
    }

    /// Restores the stored model, or starts over if it does not match the
    /// recorded progress.
    fn ensure_state(&mut self, store: &dyn TrialStore) -> Result<(), ExperimentError> {
        if self.state.is_some() {
            return Ok(());
        }
        if self.progress.trained_epochs > 0 {
            let expected_steps = self.progress.trained_epochs as u64 * self.steps_per_epoch();
            match store.load_model(self.seed) {
                Some((model, adam)) if model.config() == &self.model_config && adam.t == expected_steps => {
                    self.state = Some((model, adam));
                    return Ok(());
                }
                _ => {
                    self.progress.checkpoints.clear();
                    self.progress.trained_epochs = 0;
                }
            }
        }
        let model = init_model(&self.model_config)?;
        let adam = AdamState::new(
            AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            model.params(),
        );
        self.state = Some((model, adam));
        Ok(())
    }

    /// Maskings are drawn once per trial unless `remask_per_epoch` is set;
    /// the order is reshuffled every epoch.
    fn epoch_data(&mut self, epoch: usize) -> Result<Vec<MaskedExample>, ExperimentError> {
        let mut data = if self.train.remask_per_epoch {
            let mut rng = stream(self.seed, MASKING_STREAM, epoch);
            self.scenario.build_epoch(&self.train_chunks, &mut rng)?
        } else {
            if self.fixed_masks.is_none() {
                let mut rng = Rng::new(derive_seed(self.seed, MASKING_STREAM));
                self.fixed_masks = Some(self.scenario.build_epoch(&self.train_chunks, &mut rng)?);
            }
            self.fixed_masks.clone().unwrap()
        };
        stream(self.seed, SHUFFLE_STREAM, epoch).shuffle(&mut data);
        Ok(data)
    }

    /// Trains up to the `k`-th scheduled epoch and evaluates there, unless
    /// that evaluation is already recorded.
    fn advance(&mut self, k: usize, store: &dyn TrialStore) -> Result<(), ExperimentError> {
        if self.progress.checkpoints.len() > k {
            return Ok(());
        }
        self.ensure_state(store)?;
        let schedule = self.train.schedule.epochs();
        while self.progress.checkpoints.len() <= k {
            let target = schedule[self.progress.checkpoints.len()];
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for epoch in self.progress.trained_epochs + 1..=target {
                let data = self.epoch_data(epoch)?;
                let (model, adam) = self.state.as_mut().unwrap();
                loss_sum = 0.0;
                steps = 0;
                for batch in data.chunks(self.train.batch_size) {
                    loss_sum += train_step(model, batch, adam)?;
                    steps += 1;
                }
                self.progress.trained_epochs = epoch;
            }
            let (model, adam) = self.state.as_ref().unwrap();
            let ev = evaluate(model, self.scenario, &self.questions)?;
            let eval = CheckpointEval {
                epoch: target,
                accuracy: ev.accuracy(),
                correct: ev.correct,
                total: ev.total,
                confusion: ev.confusion,
                train_loss: loss_sum / steps as f64,
                carried: false,
            };
            store.progress(self.seed, &eval);
            self.progress.checkpoints.push(eval);
            store.store(&self.progress, model, adam)?;
        }
        Ok(())
    }

    /// The result as if training had stopped after the `k`-th scheduled
    /// epoch, with that evaluation repeated for the rest of the schedule.
    fn finish(&self, k: usize) -> TrialResult {
        let schedule = self.train.schedule.epochs();
        let mut checkpoints = self.progress.checkpoints[..=k].to_vec();
        let last = checkpoints[k].clone();
        for &epoch in &schedule[k + 1..] {
            checkpoints.push(CheckpointEval {
                epoch,
                carried: true,
                ..last.clone()
            });
        }
        TrialResult {
            checkpoints,
            trained_epochs: schedule[k],
            ..self.progress.clone()
        }
    }
}

/// A single trial; the same as a one-trial [`run_holdout`].
pub fn run_trial(
    scenario: &Scenario,
    model_config: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    store: &dyn TrialStore,
) -> Result<TrialResult, ExperimentError> {
    let mut result = run_holdout(scenario, model_config, train, seed, 1, 1, store)?;
    Ok(result.trials.pop().unwrap())
}

/// Per-trial and trial-averaged accuracy triples at every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub epochs: Vec<usize>,
    pub trials: Vec<Vec<[Option<f64>; 3]>>,
    pub mean: Vec<[Option<f64>; 3]>,
}

impl LearningCurve {
    /// Arithmetic mean across trials, skipping absent cells.
    pub fn from_trials(trials: &[TrialResult]) -> Result<Self, ExperimentError> {
        let first = trials.first().ok_or(ExperimentError::Config("no trials".into()))?;
        let epochs: Vec<usize> = first.checkpoints.iter().map(|c| c.epoch).collect();
        for t in trials {
            if t.checkpoints.iter().map(|c| c.epoch).ne(epochs.iter().copied()) {
                return Err(ExperimentError::Config(format!("trial {} has a different schedule", t.seed)));
            }
        }
        let per_trial: Vec<Vec<[Option<f64>; 3]>> = trials
            .iter()
            .map(|t| t.checkpoints.iter().map(|c| c.accuracy).collect())
            .collect();
        let mean = (0..epochs.len())
            .map(|i| {
                std::array::from_fn(|q| {
                    let present: Vec<f64> = per_trial.iter().filter_map(|t| t[i][q]).collect();
                    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
                })
            })
            .collect();
        Ok(Self {
            epochs,
            trials: per_trial,
            mean,
        })
    }

    pub fn mean_points(&self) -> Vec<(usize, [Option<f64>; 3])> {
        self.epochs.iter().copied().zip(self.mean.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutResult {
    pub trials: Vec<TrialResult>,
    pub curve: LearningCurve,
}

impl HoldoutResult {
    /// Confusion counts summed over trials at each checkpoint.
    pub fn pooled_confusion(&self) -> Vec<(usize, ConfusionRecord)> {
        self.curve
            .epochs
            .iter()
            .enumerate()
            .map(|(i, &epoch)| {
                let mut rec = ConfusionRecord::default();
                for t in &self.trials {
                    rec.merge(&t.checkpoints[i].confusion);
                }
                (epoch, rec)
            })
            .collect()
    }
}

/// Runs trials with seeds `base_seed + i` in lockstep: every trial is
/// trained to the next scheduled epoch and evaluated, then the averaged
/// curve decides whether to stop early. Up to `workers` trials train at the
/// same time; results do not depend on the worker count.
pub fn run_holdout(
    scenario: &Scenario,
    model_config: &ModelConfig,
    train: &TrainConfig,
    base_seed: u64,
    n_trials: usize,
    workers: usize,
    store: &dyn TrialStore,
) -> Result<HoldoutResult, ExperimentError> {
    if n_trials == 0 {
        return Err(ExperimentError::Config("n_trials must be at least 1".into()));
    }
    train.validate()?;
    let trials = (0..n_trials as u64)
        .map(|i| Trial::new(scenario, model_config, train, base_seed.wrapping_add(i), store).map(Mutex::new))
        .collect::<Result<Vec<_>, _>>()?;
    let workers = workers.clamp(1, n_trials);
    let schedule = train.schedule.epochs();
    let mut stop = schedule.len() - 1;
    let mut streak = 0;
    for k in 0..schedule.len() {
        advance_all(&trials, k, workers, store)?;
        let done: Vec<TrialResult> = trials.iter().map(|t| t.lock().unwrap().finish(k)).collect();
        let mean = LearningCurve::from_trials(&done)?.mean[k];
        let converged = mean.iter().all(|a| a.is_none_or(|a| a >= train.early_exit_accuracy));
        streak = if converged { streak + 1 } else { 0 };
        if train.early_exit && streak >= train.early_exit_checkpoints {
            stop = k;
            break;
        }
    }
    let trials: Vec<TrialResult> = trials.iter().map(|t| t.lock().unwrap().finish(stop)).collect();
    let curve = LearningCurve::from_trials(&trials)?;
    Ok(HoldoutResult { trials, curve })
}

fn advance_all(trials: &[Mutex<Trial>], k: usize, workers: usize, store: &dyn TrialStore) -> Result<(), ExperimentError> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<(usize, ExperimentError)>> = Mutex::new(None);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= trials.len() {
            break;
        }
        if let Err(e) = trials[i].lock().unwrap().advance(k, store) {
            let mut f = failure.lock().unwrap();
            if f.as_ref().is_none_or(|(j, _)| i < *j) {
                *f = Some((i, e));
            }
            next.store(trials.len(), Ordering::SeqCst);
        }
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    match failure.into_inner().unwrap() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}
