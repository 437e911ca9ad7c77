use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, QType, Question};
use crate::model::EncoderModel;
use crate::scenario::Scenario;

/// Anything that answers fill-in questions with one token id each.
pub trait Responder {
    fn answer(&self, questions: &[Question]) -> Result<Vec<usize>, ExperimentError>;
}

/// Full-vocabulary top-1.
impl Responder for EncoderModel {
    fn answer(&self, questions: &[Question]) -> Result<Vec<usize>, ExperimentError> {
        let inputs: Vec<_> = questions.iter().map(|q| q.input.clone()).collect();
        let preds = self.predict_batch(&inputs)?;
        Ok(preds.iter().map(|p| p[0].top1()).collect())
    }
}

/// Always gives the same token.
pub struct ConstantResponder(pub usize);

impl Responder for ConstantResponder {
    fn answer(&self, questions: &[Question]) -> Result<Vec<usize>, ExperimentError> {
        Ok(vec![self.0; questions.len()])
    }
}

/// Predicted-token counts per question type.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionRecord {
    /// Indexed by [`QType::index`]; token id → count.
    pub counts: [BTreeMap<usize, usize>; 3],
}

impl ConfusionRecord {
    pub fn record(&mut self, qtype: QType, token: usize) {
        *self.counts[qtype.index()].entry(token).or_default() += 1;
    }

    pub fn total(&self, qtype: QType) -> usize {
        self.counts[qtype.index()].values().sum()
    }

    pub fn count(&self, qtype: QType, token: usize) -> usize {
        self.counts[qtype.index()].get(&token).copied().unwrap_or(0)
    }

    /// Share of `qtype` questions answered with `token`; absent if there are
    /// no such questions.
    pub fn proportion(&self, qtype: QType, token: usize) -> Option<f64> {
        let total = self.total(qtype);
        (total > 0).then(|| self.count(qtype, token) as f64 / total as f64)
    }

    pub fn merge(&mut self, other: &ConfusionRecord) {
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (&token, &n) in theirs {
                *mine.entry(token).or_default() += n;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: [usize; 3],
    pub total: [usize; 3],
    pub confusion: ConfusionRecord,
}

impl Evaluation {
    /// Per-type accuracy; `None` for a type with no questions.
    pub fn accuracy(&self) -> [Option<f64>; 3] {
        std::array::from_fn(|i| (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64))
    }
}

pub fn evaluate<R: Responder + ?Sized>(
    responder: &R,
    scenario: &Scenario,
    questions: &[Question],
) -> Result<Evaluation, ExperimentError> {
    let answers = responder.answer(questions)?;
    let mut out = Evaluation::default();
    for (q, &token) in questions.iter().zip(&answers) {
        let i = q.qtype.index();
        out.total[i] += 1;
        if q.is_correct(scenario, token) {
            out.correct[i] += 1;
        }
        out.confusion.record(q.qtype, token);
    }
    Ok(out)
}
