//! Masked-language-model experiments on a closed caregiver-child scenario.
//!
//! The crate is split into four layers:
//!
//! * [`numkernel`]: `f64` tensors, a reverse-mode tape, Adam and a
//!   finite-difference gradient checker.
//! * [`scenario`]: vocabulary, utterance inventory, sense states, the
//!   consistency rules, chunk enumeration/sampling and MLM masking.
//! * [`model`]: the self-attention encoder with token, position and slot
//!   embeddings and a weight-tied MLM head, plus checkpoints.
//! * [`experiment`]: fill-in questions on the particles *yo* and *ne*,
//!   training trials, repeated holdout, phase detection and confusion trends.

pub mod experiment;
pub mod model;
pub mod numkernel;
pub mod scenario;
