//! Chunk universe, holdout sampling, fixed-layout encoding and MLM masking.

use super::rules::{consistency_check, sense_violations, Chunk};
use super::{
    Modality, Rng, ScenarioConfig, ScenarioError, SenseState, Utterance, Vocabulary,
    MAX_UTTERANCE_WORDS,
};

pub const SEQ_LEN: usize = 2 * MAX_UTTERANCE_WORDS + 5;
pub const N_SLOTS: usize = 7;
/// prev ×3 | cur ×3 | vision | inference | taste | hunger | desire
pub const SLOT_IDS: [usize; SEQ_LEN] = [0, 0, 0, 1, 1, 1, 2, 3, 4, 5, 6];

pub const SAMPLE_SIZE: usize = 470;
pub const TRAIN_SIZE: usize = 440;
pub const TEST_SIZE: usize = 30;
pub const MASKINGS_PER_CHUNK: usize = 50;
pub const EPOCH_SIZE: usize = TRAIN_SIZE * MASKINGS_PER_CHUNK;

pub const MASK_PROB: f64 = 0.15;
const MASK_TOKEN_PROB: f64 = 0.8;
const RANDOM_TOKEN_PROB: f64 = 0.1;

const MAX_SPLIT_ATTEMPTS: usize = 1000;

/// Sense states allowed by the sense-only rules, in combination order.
pub fn valid_sense_states(config: &ScenarioConfig) -> Vec<SenseState> {
    SenseState::all_combinations()
        .into_iter()
        .filter(|s| sense_violations(config, s).is_empty())
        .collect()
}

/// Every consistent chunk, ordered by prev utterance, then current
/// utterance (`[NOUTT]` first, then inventory order), then sense state.
pub fn enumerate_chunks(config: &ScenarioConfig) -> Vec<Chunk> {
    let utterances: Vec<Utterance> = std::iter::once(Utterance::none())
        .chain(config.inventory.iter().map(|s| Utterance::parse(s)))
        .collect();
    let states = valid_sense_states(config);
    let mut out = Vec::new();
    for prev in &utterances {
        for cur in &utterances {
            for senses in &states {
                let chunk = Chunk {
                    prev: prev.clone(),
                    cur: cur.clone(),
                    senses: *senses,
                };
                if consistency_check(config, &chunk).is_empty() {
                    out.push(chunk);
                }
            }
        }
    }
    out
}

/// The 470 sampled chunks of one holdout trial and their 440/30 split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub fingerprint: String,
    /// All drawn chunks in draw order.
    pub sample: Vec<Chunk>,
    pub train: Vec<Chunk>,
    pub test: Vec<Chunk>,
}

/// Draws 470 distinct chunks uniformly without replacement. The first 30
/// two-utterance chunks in draw order form the test set and the remaining
/// 440 the training set. If fewer than 30 drawn chunks have two
/// utterances, the whole draw is rejected and repeated from the same
/// generator.
pub fn sample_split(universe: &[Chunk], seed: u64, fingerprint: &str) -> Result<DatasetSplit, ScenarioError> {
    if universe.len() < SAMPLE_SIZE {
        return Err(ScenarioError::UniverseTooSmall {
            size: universe.len(),
            needed: SAMPLE_SIZE,
        });
    }
    let mut rng = Rng::new(seed);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let mut indices: Vec<usize> = (0..universe.len()).collect();
        for i in 0..SAMPLE_SIZE {
            let j = i + rng.below(universe.len() - i);
            indices.swap(i, j);
        }
        let sample: Vec<Chunk> = indices[..SAMPLE_SIZE]
            .iter()
            .map(|&i| universe[i].clone())
            .collect();
        let mut test = Vec::with_capacity(TEST_SIZE);
        let mut train = Vec::with_capacity(TRAIN_SIZE);
        for chunk in &sample {
            if test.len() < TEST_SIZE && chunk.has_two_utterances() {
                test.push(chunk.clone());
            } else {
                train.push(chunk.clone());
            }
        }
        if test.len() == TEST_SIZE {
            return Ok(DatasetSplit {
                seed,
                fingerprint: fingerprint.to_string(),
                sample,
                train,
                test,
            });
        }
    }
    Err(ScenarioError::TooFewTwoUtterance {
        attempts: MAX_SPLIT_ATTEMPTS,
    })
}

/// A chunk laid out as 11 token ids with their slot ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedChunk {
    pub token_ids: [usize; SEQ_LEN],
    pub slot_ids: [usize; SEQ_LEN],
}

fn place_utterance(vocab: &Vocabulary, u: &Utterance, out: &mut [usize]) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = match u.words().get(i) {
            Some(w) => vocab.id(w).expect("utterance words are in the vocabulary"),
            None => vocab.pad_id(),
        };
    }
}

/// Layout: prev utterance padded to 3 | cur utterance padded to 3 | the
/// five sense tokens in modality order.
pub fn encode_chunk(chunk: &Chunk, vocab: &Vocabulary) -> EncodedChunk {
    let mut token_ids = [0; SEQ_LEN];
    place_utterance(vocab, &chunk.prev, &mut token_ids[0..MAX_UTTERANCE_WORDS]);
    place_utterance(
        vocab,
        &chunk.cur,
        &mut token_ids[MAX_UTTERANCE_WORDS..2 * MAX_UTTERANCE_WORDS],
    );
    for (i, token) in chunk.senses.tokens().iter().enumerate() {
        token_ids[2 * MAX_UTTERANCE_WORDS + i] = vocab.id(token).expect("sense token");
    }
    EncodedChunk {
        token_ids,
        slot_ids: SLOT_IDS,
    }
}

fn read_utterance(vocab: &Vocabulary, ids: &[usize]) -> Result<Utterance, ScenarioError> {
    let mut words = Vec::new();
    for &id in ids {
        if id == vocab.pad_id() {
            break;
        }
        let token = vocab
            .token(id)
            .ok_or_else(|| ScenarioError::Decode(format!("token id {id} out of range")))?;
        words.push(token);
    }
    if words.is_empty() {
        return Err(ScenarioError::Decode("empty utterance slot".into()));
    }
    Ok(Utterance::from_words(&words))
}

/// Inverse of [`encode_chunk`].
pub fn decode_chunk(token_ids: &[usize], vocab: &Vocabulary) -> Result<Chunk, ScenarioError> {
    if token_ids.len() != SEQ_LEN {
        return Err(ScenarioError::Decode(format!(
            "expected {SEQ_LEN} tokens, got {}",
            token_ids.len()
        )));
    }
    let prev = read_utterance(vocab, &token_ids[0..MAX_UTTERANCE_WORDS])?;
    let cur = read_utterance(vocab, &token_ids[MAX_UTTERANCE_WORDS..2 * MAX_UTTERANCE_WORDS])?;
    let mut sense = [""; 5];
    for (i, m) in Modality::ALL.iter().enumerate() {
        let id = token_ids[2 * MAX_UTTERANCE_WORDS + i];
        sense[i] = vocab
            .token(id)
            .filter(|t| m.tokens().contains(t))
            .ok_or_else(|| ScenarioError::Decode(format!("position {} is not a {} token", 6 + i, m.name())))?;
    }
    let senses = SenseState::from_tokens(sense).expect("checked per modality");
    Ok(Chunk { prev, cur, senses })
}

/// A masked training (or probe) sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub token_ids: Vec<usize>,
    pub slot_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
    /// Original token at each mask position.
    pub target_ids: Vec<usize>,
    /// No position survived the Bernoulli draw and one was forced.
    pub forced: bool,
}

/// BERT-style corruption: each non-`[PAD]` position is selected with
/// probability 0.15 (one is forced if none is); a selected position becomes
/// `[MASK]` 80% of the time, a uniformly drawn non-special-marker token
/// (anything but `[PAD]`/`[MASK]`) 10%, and stays unchanged 10%.
pub fn mask_chunk(encoded: &EncodedChunk, vocab: &Vocabulary, rng: &mut Rng) -> MaskedExample {
    let candidates: Vec<usize> = (0..SEQ_LEN)
        .filter(|&p| encoded.token_ids[p] != vocab.pad_id())
        .collect();
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.bernoulli(MASK_PROB))
        .collect();
    let forced = selected.is_empty();
    if forced {
        selected.push(candidates[rng.below(candidates.len())]);
    }
    let mut token_ids = encoded.token_ids.to_vec();
    let mut target_ids = Vec::with_capacity(selected.len());
    for &p in &selected {
        target_ids.push(token_ids[p]);
        let r = rng.uniform();
        if r < MASK_TOKEN_PROB {
            token_ids[p] = vocab.mask_id();
        } else if r < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB {
            // ids 0 and 1 are [PAD] and [MASK]
            token_ids[p] = 2 + rng.below(vocab.len() - 2);
        }
    }
    MaskedExample {
        token_ids,
        slot_ids: encoded.slot_ids.to_vec(),
        mask_positions: selected,
        target_ids,
        forced,
    }
}

/// `per_chunk` maskings of every chunk, shuffled.
pub fn mask_corpus(chunks: &[Chunk], vocab: &Vocabulary, per_chunk: usize, rng: &mut Rng) -> Vec<MaskedExample> {
    let mut out = Vec::with_capacity(chunks.len() * per_chunk);
    for chunk in chunks {
        let encoded = encode_chunk(chunk, vocab);
        for _ in 0..per_chunk {
            out.push(mask_chunk(&encoded, vocab, rng));
        }
    }
    rng.shuffle(&mut out);
    out
}

/// One epoch: 50 maskings of each of the 440 training chunks.
pub fn build_epoch(train: &[Chunk], vocab: &Vocabulary, rng: &mut Rng) -> Result<Vec<MaskedExample>, ScenarioError> {
    if train.len() != TRAIN_SIZE {
        return Err(ScenarioError::WrongTrainSize {
            expected: TRAIN_SIZE,
            found: train.len(),
        });
    }
    Ok(mask_corpus(train, vocab, MASKINGS_PER_CHUNK, rng))
}
