//! The closed caregiver-child world: vocabulary, utterances, sense states,
//! consistency rules, chunk enumeration and sampling, and MLM masking.

mod config;
mod dataset;
mod io;
mod rules;
mod sense;
mod utterance;
mod vocab;

pub use config::{short_hash, MatchRule, RuleSet, ScenarioConfig};
pub use dataset::{
    build_epoch, decode_chunk, encode_chunk, enumerate_chunks, mask_chunk, mask_corpus, sample_split,
    valid_sense_states, DatasetSplit, EncodedChunk, MaskedExample, EPOCH_SIZE, MASKINGS_PER_CHUNK,
    MASK_PROB, N_SLOTS, SAMPLE_SIZE, SEQ_LEN, SLOT_IDS, TEST_SIZE, TRAIN_SIZE,
};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, ChunkRecord, DatasetHeader};
pub use rules::{consistency_check, utterance_matches, Chunk, Rule, Violation};
pub use sense::{Desire, Hunger, Inference, Modality, SenseState, Taste, Vision};
pub use utterance::{Particle, Utterance, UtteranceSlot, NO_UTTERANCE};
pub use vocab::{build_vocabulary, Vocabulary, MASK, PAD};

use crate::numkernel::Rng;

pub const MAX_UTTERANCE_WORDS: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error("unknown utterance {0:?}")]
    UnknownUtterance(String),
    #[error("chunk universe has {size} chunks, need at least {needed}")]
    UniverseTooSmall { size: usize, needed: usize },
    #[error("no draw produced enough two-utterance chunks after {attempts} attempts")]
    TooFewTwoUtterance { attempts: usize },
    #[error("training set must have {expected} chunks, got {found}")]
    WrongTrainSize { expected: usize, found: usize },
    #[error("cannot decode sequence: {0}")]
    Decode(String),
    #[error("dataset record: {0}")]
    Record(String),
    #[error("dataset io: {0}")]
    Io(String),
}

/// A validated scenario with its vocabulary and chunk universe.
#[derive(Clone, Debug)]
pub struct Scenario {
    config: ScenarioConfig,
    vocab: Vocabulary,
    sense_states: Vec<SenseState>,
    universe: Vec<Chunk>,
    fingerprint: String,
}

/// Particle occurrence counts over a set of chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParticleCounts {
    pub yo: usize,
    pub ne: usize,
}

impl ParticleCounts {
    pub fn ne_to_yo(&self) -> f64 {
        self.ne as f64 / self.yo as f64
    }

    pub fn of(chunks: &[Chunk]) -> Self {
        let mut out = ParticleCounts::default();
        for c in chunks {
            for u in [&c.prev, &c.cur] {
                match u.particle() {
                    Some(Particle::Yo) => out.yo += 1,
                    Some(Particle::Ne) => out.ne += 1,
                    None => {}
                }
            }
        }
        out
    }
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let vocab = build_vocabulary(&config);
        let sense_states = valid_sense_states(&config);
        let universe = enumerate_chunks(&config);
        let fingerprint = config.fingerprint();
        Ok(Self {
            config,
            vocab,
            sense_states,
            universe,
            fingerprint,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn sense_states(&self) -> &[SenseState] {
        &self.sense_states
    }

    pub fn universe(&self) -> &[Chunk] {
        &self.universe
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn consistency_check(&self, chunk: &Chunk) -> Vec<Violation> {
        consistency_check(&self.config, chunk)
    }

    pub fn is_consistent(&self, chunk: &Chunk) -> bool {
        self.consistency_check(chunk).is_empty()
    }

    /// Hyphen segmentation of an inventory utterance or `[NOUTT]`.
    pub fn tokenize_utterance(&self, surface: &str) -> Result<Vec<String>, ScenarioError> {
        if surface != NO_UTTERANCE && !self.config.inventory.iter().any(|s| s == surface) {
            return Err(ScenarioError::UnknownUtterance(surface.to_string()));
        }
        Ok(Utterance::parse(surface).words().to_vec())
    }

    pub fn encode_chunk(&self, chunk: &Chunk) -> EncodedChunk {
        encode_chunk(chunk, &self.vocab)
    }

    pub fn decode_chunk(&self, token_ids: &[usize]) -> Result<Chunk, ScenarioError> {
        decode_chunk(token_ids, &self.vocab)
    }

    pub fn sample_split(&self, seed: u64) -> Result<DatasetSplit, ScenarioError> {
        sample_split(&self.universe, seed, &self.fingerprint)
    }

    pub fn build_epoch(&self, train: &[Chunk], rng: &mut Rng) -> Result<Vec<MaskedExample>, ScenarioError> {
        build_epoch(train, &self.vocab, rng)
    }

    pub fn particle_counts(&self) -> ParticleCounts {
        ParticleCounts::of(&self.universe)
    }
}
