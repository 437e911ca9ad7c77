use std::fmt;

use serde::{Deserialize, Serialize};

pub const NO_UTTERANCE: &str = "[NOUTT]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Particle {
    Yo,
    Ne,
}

impl Particle {
    pub const ALL: [Particle; 2] = [Particle::Yo, Particle::Ne];

    pub fn token(self) -> &'static str {
        match self {
            Particle::Yo => "yo",
            Particle::Ne => "ne",
        }
    }

    pub fn from_token(token: &str) -> Option<Particle> {
        match token {
            "yo" => Some(Particle::Yo),
            "ne" => Some(Particle::Ne),
            _ => None,
        }
    }
}

impl fmt::Display for Particle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Which of the two utterance slots of a chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtteranceSlot {
    Prev,
    Cur,
}

impl UtteranceSlot {
    pub fn name(self) -> &'static str {
        match self {
            UtteranceSlot::Prev => "prev",
            UtteranceSlot::Cur => "cur",
        }
    }
}

/// A caregiver utterance, hyphen-segmented into word tokens, or the
/// no-utterance marker.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Utterance {
    surface: String,
    words: Vec<String>,
}

impl Utterance {
    pub fn none() -> Self {
        Utterance {
            surface: NO_UTTERANCE.to_string(),
            words: vec![NO_UTTERANCE.to_string()],
        }
    }

    /// Splits a surface form on hyphens. Does not check the inventory.
    pub fn parse(surface: &str) -> Self {
        if surface == NO_UTTERANCE {
            return Self::none();
        }
        Utterance {
            surface: surface.to_string(),
            words: surface.split('-').map(str::to_string).collect(),
        }
    }

    pub fn from_words(words: &[&str]) -> Self {
        Self::parse(&words.join("-"))
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_none(&self) -> bool {
        self.surface == NO_UTTERANCE
    }

    pub fn particle(&self) -> Option<Particle> {
        if self.is_none() {
            return None;
        }
        self.words.last().and_then(|w| Particle::from_token(w))
    }

    /// The content part before the particle, e.g. `Ringo-da` for `Ringo-da-yo`.
    pub fn stem(&self) -> String {
        match self.particle() {
            Some(_) => self.words[..self.words.len() - 1].join("-"),
            None => self.surface.clone(),
        }
    }

    pub fn with_particle(&self, particle: Particle) -> Utterance {
        Utterance::parse(&format!("{}-{}", self.stem(), particle.token()))
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}
