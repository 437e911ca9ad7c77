use std::collections::HashMap;

use super::{Modality, ScenarioConfig, Utterance, NO_UTTERANCE};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";

/// Closed token set. Ids are assigned in a fixed order: `[PAD]`, `[MASK]`,
/// `[NOUTT]`, then inventory words by first appearance, then sense tokens
/// in modality order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    first_sense: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        1
    }

    pub fn no_utterance_id(&self) -> usize {
        2
    }

    /// Word tokens (inventory words only).
    pub fn words(&self) -> &[String] {
        &self.tokens[3..self.first_sense]
    }

    pub fn sense_tokens(&self) -> &[String] {
        &self.tokens[self.first_sense..]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < 3
    }
}

pub fn build_vocabulary(config: &ScenarioConfig) -> Vocabulary {
    let mut tokens: Vec<String> = vec![PAD.into(), MASK.into(), NO_UTTERANCE.into()];
    for surface in &config.inventory {
        for word in Utterance::parse(surface).words() {
            if !tokens.contains(word) {
                tokens.push(word.clone());
            }
        }
    }
    let first_sense = tokens.len();
    for modality in Modality::ALL {
        tokens.extend(modality.tokens().into_iter().map(String::from));
    }
    let ids = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Vocabulary {
        tokens,
        ids,
        first_sense,
    }
}
