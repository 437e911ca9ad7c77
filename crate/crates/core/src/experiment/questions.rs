use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::scenario::{Chunk, MaskedExample, Particle, Scenario, ScenarioConfig, UtteranceSlot};

/// Question type by which particles are acceptable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QType {
    /// Only *yo*.
    I,
    /// Only *ne*.
    II,
    /// Either.
    III,
}

impl QType {
    pub const ALL: [QType; 3] = [QType::I, QType::II, QType::III];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lower-case roman numeral used in file formats.
    pub fn label(self) -> &'static str {
        match self {
            QType::I => "i",
            QType::II => "ii",
            QType::III => "iii",
        }
    }

    pub fn from_label(label: &str) -> Option<QType> {
        QType::ALL.into_iter().find(|q| q.label() == label)
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which of the two particles would be correct at a masked position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorrectSet {
    pub yo: bool,
    pub ne: bool,
}

impl CorrectSet {
    pub fn contains(self, p: Particle) -> bool {
        match p {
            Particle::Yo => self.yo,
            Particle::Ne => self.ne,
        }
    }

    fn insert(&mut self, p: Particle) {
        match p {
            Particle::Yo => self.yo = true,
            Particle::Ne => self.ne = true,
        }
    }

    pub fn is_empty(self) -> bool {
        !self.yo && !self.ne
    }

    pub fn qtype(self) -> Option<QType> {
        match (self.yo, self.ne) {
            (true, false) => Some(QType::I),
            (false, true) => Some(QType::II),
            (true, true) => Some(QType::III),
            (false, false) => None,
        }
    }
}

/// A fill-in question: one sentence-final particle of a test chunk hidden
/// behind `[MASK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub chunk: Chunk,
    pub slot: UtteranceSlot,
    pub position: usize,
    /// Encoded chunk with `[MASK]` at `position`; the target is the particle
    /// actually present in the chunk.
    pub input: MaskedExample,
    pub correct: CorrectSet,
    pub qtype: QType,
}

impl Question {
    pub fn is_correct(&self, scenario: &Scenario, token_id: usize) -> bool {
        scenario
            .vocab()
            .token(token_id)
            .and_then(Particle::from_token)
            .is_some_and(|p| self.correct.contains(p))
    }
}

/// One question per particle occurrence, previous utterance first.
pub fn build_questions(scenario: &Scenario, chunks: &[Chunk]) -> Result<Vec<Question>, ExperimentError> {
    let mut out = Vec::with_capacity(chunks.len() * 2);
    for chunk in chunks {
        let before = out.len();
        let encoded = scenario.encode_chunk(chunk);
        for (slot, offset) in [(UtteranceSlot::Prev, 0), (UtteranceSlot::Cur, 3)] {
            let utterance = chunk.utterance(slot);
            if utterance.particle().is_none() {
                continue;
            }
            let position = offset + utterance.words().len() - 1;
            let correct = label_question(scenario.config(), chunk, slot);
            let qtype = correct.qtype().ok_or_else(|| ExperimentError::Unanswerable {
                chunk: format!("{chunk:?}"),
                slot: slot.name(),
            })?;
            let mut token_ids = encoded.token_ids.to_vec();
            let target = token_ids[position];
            token_ids[position] = scenario.vocab().mask_id();
            out.push(Question {
                chunk: chunk.clone(),
                slot,
                position,
                input: MaskedExample {
                    token_ids,
                    slot_ids: encoded.slot_ids.to_vec(),
                    mask_positions: vec![position],
                    target_ids: vec![target],
                    forced: false,
                },
                correct,
                qtype,
            });
        }
        if out.len() == before {
            return Err(ExperimentError::NoParticles(format!("{} / {}", chunk.prev.surface(), chunk.cur.surface())));
        }
    }
    Ok(out)
}

/// A particle is correct iff substituting it gives an inventory utterance
/// and a chunk that passes every consistency rule.
pub fn label_question(config: &ScenarioConfig, chunk: &Chunk, slot: UtteranceSlot) -> CorrectSet {
    let mut set = CorrectSet::default();
    let utterance = chunk.utterance(slot);
    for p in Particle::ALL {
        let candidate = utterance.with_particle(p);
        let in_inventory = config.inventory.iter().any(|s| s == candidate.surface());
        if in_inventory && crate::scenario::consistency_check(config, &chunk.with_utterance(slot, candidate)).is_empty() {
            set.insert(p);
        }
    }
    set
}

/// Independent labeling by membership in the enumerated universe.
pub struct BruteForceOracle {
    universe: HashSet<Chunk>,
}

impl BruteForceOracle {
    pub fn new(universe: &[Chunk]) -> Self {
        Self {
            universe: universe.iter().cloned().collect(),
        }
    }

    pub fn label(&self, chunk: &Chunk, slot: UtteranceSlot) -> CorrectSet {
        let mut set = CorrectSet::default();
        for p in Particle::ALL {
            let candidate = chunk.with_utterance(slot, chunk.utterance(slot).with_particle(p));
            if self.universe.contains(&candidate) {
                set.insert(p);
            }
        }
        set
    }
}

pub fn label_oracle_bruteforce(universe: &[Chunk], chunk: &Chunk, slot: UtteranceSlot) -> CorrectSet {
    BruteForceOracle::new(universe).label(chunk, slot)
}

/// Question counts per type.
pub fn type_counts(questions: &[Question]) -> [usize; 3] {
    let mut counts = [0; 3];
    for q in questions {
        counts[q.qtype.index()] += 1;
    }
    counts
}
