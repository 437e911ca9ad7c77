//! The fill-in experiment: particle questions, training trials with
//! scheduled evaluation, repeated holdout, phase detection, confusion trends
//! and the text artifacts of a run.

mod evaluate;
mod phases;
mod questions;
mod report;
mod trial;

pub use evaluate::{evaluate, ConfusionRecord, ConstantResponder, Evaluation, Responder};
pub use phases::{
    confusion_trends, detect_phases, pair_series, question_type_ratio, PhaseReport, PhaseThresholds, TypeRatio, UShape,
    WrongAnswers,
};
pub use questions::{
    build_questions, label_oracle_bruteforce, label_question, type_counts, BruteForceOracle, CorrectSet, QType, Question,
};
pub use report::{confusion_csv, curves_csv, phase_report_toml, svg_plot};
pub use trial::{
    run_holdout, run_trial, CheckpointEval, CheckpointSchedule, HoldoutResult, LearningCurve, NoStore, TrainConfig,
    TrialResult, TrialStore, INIT_STREAM, MASKING_STREAM, SHUFFLE_STREAM,
};

use crate::model::ModelError;
use crate::scenario::ScenarioError;

/// Number of holdout repetitions in the reference protocol.
pub const N_TRIALS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("experiment config: {0}")]
    Config(String),
    #[error("checkpoint schedule: {0}")]
    Schedule(String),
    #[error("chunk has no sentence-final particle: {0}")]
    NoParticles(String),
    #[error("no particle is acceptable in the {slot} utterance of {chunk}")]
    Unanswerable { chunk: String, slot: &'static str },
    #[error("phase detection needs at least 3 checkpoints, got {0}")]
    TooFewCheckpoints(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
