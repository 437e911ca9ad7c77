use std::fmt;

use super::{Particle, ScenarioConfig, SenseState, Utterance, UtteranceSlot};
use super::sense::{Taste, Vision};

/// One interaction datum: what was said a moment ago, what is said now,
/// and what the child currently perceives.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub prev: Utterance,
    pub cur: Utterance,
    pub senses: SenseState,
}

impl Chunk {
    pub fn utterance(&self, slot: UtteranceSlot) -> &Utterance {
        match slot {
            UtteranceSlot::Prev => &self.prev,
            UtteranceSlot::Cur => &self.cur,
        }
    }

    pub fn with_utterance(&self, slot: UtteranceSlot, utterance: Utterance) -> Chunk {
        let mut out = self.clone();
        match slot {
            UtteranceSlot::Prev => out.prev = utterance,
            UtteranceSlot::Cur => out.cur = utterance,
        }
        out
    }

    /// Both slots hold real utterances.
    pub fn has_two_utterances(&self) -> bool {
        !self.prev.is_none() && !self.cur.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Utterance is not in the inventory.
    Inventory,
    CurNeMatches,
    PrevYoMatches,
    CurYoNovel,
    NeOnly,
    InferenceFromVision,
    TasteRequiresSight,
}

impl Rule {
    pub fn code(self) -> &'static str {
        match self {
            Rule::Inventory => "R-INV",
            Rule::CurNeMatches => "R-NE",
            Rule::PrevYoMatches => "R-YO-PREV",
            Rule::CurYoNovel => "R-YO-CUR",
            Rule::NeOnly => "R-NE-ONLY",
            Rule::InferenceFromVision => "R-INF",
            Rule::TasteRequiresSight => "R-TASTE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub slot: Option<UtteranceSlot>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slot {
            Some(slot) => write!(f, "{} ({})", self.rule.code(), slot.name()),
            None => f.write_str(self.rule.code()),
        }
    }
}

/// MATCH relation between an utterance's content word and the senses.
pub fn utterance_matches(config: &ScenarioConfig, utterance: &Utterance, senses: &SenseState) -> bool {
    config
        .match_rule(&utterance.stem())
        .is_some_and(|m| m.values.iter().any(|v| v == senses.token(m.modality)))
}

/// Sense-only rules (R-INF, R-TASTE).
pub fn sense_violations(config: &ScenarioConfig, senses: &SenseState) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.rules.inference_from_vision && senses.inference != senses.vision.inferred_taste() {
        out.push(Violation {
            rule: Rule::InferenceFromVision,
            slot: None,
        });
    }
    if config.rules.taste_requires_sight {
        let ok = match senses.taste {
            Taste::None => true,
            Taste::Apple => senses.vision == Vision::AppleDelicious,
            Taste::Banana => senses.vision == Vision::BananaDelicious,
        };
        if !ok {
            out.push(Violation {
                rule: Rule::TasteRequiresSight,
                slot: None,
            });
        }
    }
    out
}

fn utterance_violations(
    config: &ScenarioConfig,
    slot: UtteranceSlot,
    utterance: &Utterance,
    senses: &SenseState,
    out: &mut Vec<Violation>,
) {
    if utterance.is_none() {
        return;
    }
    let mut push = |rule| out.push(Violation { rule, slot: Some(slot) });
    if !config.inventory.iter().any(|s| s == utterance.surface()) {
        push(Rule::Inventory);
    }
    let particle = utterance.particle();
    if config.rules.ne_only
        && particle == Some(Particle::Yo)
        && config.ne_only.contains(&utterance.stem())
    {
        push(Rule::NeOnly);
    }
    let matches = || utterance_matches(config, utterance, senses);
    match (slot, particle) {
        (UtteranceSlot::Cur, Some(Particle::Ne)) if config.rules.cur_ne_matches && !matches() => {
            push(Rule::CurNeMatches)
        }
        (UtteranceSlot::Prev, Some(Particle::Yo)) if config.rules.prev_yo_matches && !matches() => {
            push(Rule::PrevYoMatches)
        }
        (UtteranceSlot::Cur, Some(Particle::Yo)) if config.rules.cur_yo_novel && matches() => {
            push(Rule::CurYoNovel)
        }
        _ => {}
    }
}

/// All rule violations of a chunk; empty means consistent.
pub fn consistency_check(config: &ScenarioConfig, chunk: &Chunk) -> Vec<Violation> {
    let mut out = Vec::new();
    utterance_violations(config, UtteranceSlot::Prev, &chunk.prev, &chunk.senses, &mut out);
    utterance_violations(config, UtteranceSlot::Cur, &chunk.cur, &chunk.senses, &mut out);
    out.extend(sense_violations(config, &chunk.senses));
    out
}
