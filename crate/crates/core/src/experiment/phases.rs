use serde::{Deserialize, Serialize};

use super::{build_questions, type_counts, ConfusionRecord, ExperimentError, QType};
use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseThresholds {
    pub hi: f64,
    pub lo: f64,
    pub dip: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            hi: 0.9,
            lo: 0.2,
            dip: 0.02,
        }
    }
}

/// Type-II dip after its phase-I high and the later recovery.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UShape {
    pub peak_epoch: usize,
    pub peak: f64,
    pub trough_epoch: usize,
    pub trough: f64,
    pub recovery_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub thresholds: PhaseThresholds,
    /// Earliest checkpoint with types II and III high and type I low.
    pub phase_one_epoch: Option<usize>,
    pub u_shape: Option<UShape>,
    pub final_epoch: usize,
    pub final_accuracy: [Option<f64>; 3],
}

/// Reads phase structure off a curve given as `(epoch, [I, II, III])`.
pub fn detect_phases(curve: &[(usize, [Option<f64>; 3])], th: PhaseThresholds) -> Result<PhaseReport, ExperimentError> {
    if curve.len() < 3 {
        return Err(ExperimentError::TooFewCheckpoints(curve.len()));
    }
    let get = |i: usize, q: QType| curve[i].1[q.index()];
    let phase_one = (0..curve.len()).find(|&i| {
        get(i, QType::II).is_some_and(|v| v >= th.hi)
            && get(i, QType::III).is_some_and(|v| v >= th.hi)
            && get(i, QType::I).is_some_and(|v| v <= th.lo)
    });
    let anchor = phase_one.or_else(|| (0..curve.len()).find(|&i| get(i, QType::II).is_some_and(|v| v >= th.hi)));

    let mut u_shape = None;
    if let Some(start) = anchor {
        let (mut peak_i, mut peak) = (start, get(start, QType::II).unwrap());
        let mut trough: Option<(usize, f64)> = None;
        for i in start + 1..curve.len() {
            let Some(v) = get(i, QType::II) else { continue };
            match trough {
                None if v > peak => (peak_i, peak) = (i, v),
                None if v <= peak - th.dip => trough = Some((i, v)),
                Some((_, t)) if v < t => trough = Some((i, v)),
                Some((ti, t)) if v >= th.hi && v > t => {
                    u_shape = Some(UShape {
                        peak_epoch: curve[peak_i].0,
                        peak,
                        trough_epoch: curve[ti].0,
                        trough: t,
                        recovery_epoch: curve[i].0,
                    });
                    break;
                }
                _ => {}
            }
        }
    }
    let (final_epoch, final_accuracy) = *curve.last().unwrap();
    Ok(PhaseReport {
        thresholds: th,
        phase_one_epoch: phase_one.map(|i| curve[i].0),
        u_shape,
        final_epoch,
        final_accuracy,
    })
}

/// Wrong answers for one checkpoint and question type, most frequent first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrongAnswers {
    pub epoch: usize,
    pub qtype: QType,
    /// `(token, count, share of wrong answers)`.
    pub ranked: Vec<(String, usize, f64)>,
}

pub fn confusion_trends(scenario: &Scenario, records: &[(usize, ConfusionRecord)]) -> Vec<WrongAnswers> {
    let vocab = scenario.vocab();
    let mut out = Vec::new();
    for (epoch, rec) in records {
        for qtype in QType::ALL {
            let wrong: Vec<(String, usize)> = rec.counts[qtype.index()]
                .iter()
                .map(|(&id, &n)| (vocab.token(id).unwrap_or("?").to_string(), n))
                .filter(|(tok, _)| !is_correct_token(qtype, tok))
                .collect();
            let total: usize = wrong.iter().map(|w| w.1).sum();
            let mut ranked: Vec<(String, usize, f64)> = wrong
                .into_iter()
                .map(|(tok, n)| (tok, n, n as f64 / total as f64))
                .collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            out.push(WrongAnswers {
                epoch: *epoch,
                qtype,
                ranked,
            });
        }
    }
    out
}

fn is_correct_token(qtype: QType, token: &str) -> bool {
    matches!(
        (qtype, token),
        (QType::I, "yo") | (QType::II, "ne") | (QType::III, "yo") | (QType::III, "ne")
    )
}

/// Share of `qtype` questions answered with `token` at each checkpoint.
pub fn pair_series(
    scenario: &Scenario,
    records: &[(usize, ConfusionRecord)],
    qtype: QType,
    token: &str,
) -> Vec<(usize, Option<f64>)> {
    let id = scenario.vocab().id(token);
    records
        .iter()
        .map(|(epoch, rec)| (*epoch, id.and_then(|id| rec.proportion(qtype, id)).or_else(|| (rec.total(qtype) > 0).then_some(0.0))))
        .collect()
}

/// Question-type counts over the splits of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRatio {
    pub counts: [usize; 3],
}

impl TypeRatio {
    /// Counts scaled to sum to 6, the total of the reference ratio 1:3:2.
    pub fn normalized(&self) -> [f64; 3] {
        let total: usize = self.counts.iter().sum();
        self.counts.map(|c| 6.0 * c as f64 / total as f64)
    }

    /// Every component within `tolerance` (relative) of 1:3:2.
    pub fn within(&self, tolerance: f64) -> bool {
        self.normalized()
            .iter()
            .zip([1.0, 3.0, 2.0])
            .all(|(got, want)| (got - want).abs() <= tolerance * want)
    }
}

pub fn question_type_ratio(scenario: &Scenario, seeds: impl IntoIterator<Item = u64>) -> Result<TypeRatio, ExperimentError> {
    let mut counts = [0; 3];
    for seed in seeds {
        let split = scenario.sample_split(seed)?;
        let c = type_counts(&build_questions(scenario, &split.test)?);
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    Ok(TypeRatio { counts })
}
