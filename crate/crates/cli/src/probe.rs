use std::fmt::Write as _;
use std::path::Path;

use smlab_core::model::{load_checkpoint, AttentionMaps, EncoderModel};
use smlab_core::scenario::{
    ChunkRecord, MaskedExample, Scenario, Utterance, MASK, MAX_UTTERANCE_WORDS, SEQ_LEN, SLOT_IDS,
};

use crate::CliError;

/// Which positions to replace with `[MASK]` before the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSpec {
    /// Only the `[MASK]` words already present in the record.
    Record,
    /// The last word of the previous or current utterance.
    Particle { cur: bool },
    Positions(Vec<usize>),
}

impl MaskSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        match text {
            "record" => Ok(MaskSpec::Record),
            "prev" => Ok(MaskSpec::Particle { cur: false }),
            "cur" => Ok(MaskSpec::Particle { cur: true }),
            _ => text
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(MaskSpec::Positions)
                .map_err(|_| CliError::Probe(format!("mask must be prev, cur, record or positions: {text:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub tokens: Vec<String>,
    /// `(position, [(token, probability)])`, best first.
    pub predictions: Vec<(usize, Vec<(String, f64)>)>,
    pub attention: AttentionMaps,
}

impl ProbeReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input: {}", self.tokens.join(" "));
        for (pos, ranked) in &self.predictions {
            let _ = writeln!(s, "position {pos}:");
            for (token, p) in ranked {
                let _ = writeln!(s, "  {token:<12} {p:.4}");
            }
        }
        s
    }

    pub fn attention_csv(&self) -> String {
        let mut s = String::from("layer,head,query,key,weight\n");
        for l in 0..self.attention.n_layers() {
            for h in 0..self.attention.n_heads() {
                for q in 0..self.attention.seq_len() {
                    for (k, w) in self.attention.row(l, h, q).iter().enumerate() {
                        let _ = writeln!(s, "{l},{h},{q},{k},{w:.6}");
                    }
                }
            }
        }
        s
    }
}

/// Token ids for a record whose utterances may contain `[MASK]` words.
/// Utterance contents are not checked against the inventory.
fn encode_lenient(scenario: &Scenario, record: &ChunkRecord) -> Result<Vec<usize>, CliError> {
    let vocab = scenario.vocab();
    let lookup = |w: &str| {
        vocab
            .id(w)
            .ok_or_else(|| CliError::Probe(format!("unknown token {w:?}")))
    };
    let mut ids = vec![vocab.pad_id(); SEQ_LEN];
    for (u, surface) in [&record.prev, &record.cur].into_iter().enumerate() {
        let utterance = Utterance::parse(surface);
        let words = utterance.words();
        if words.len() > MAX_UTTERANCE_WORDS {
            return Err(CliError::Probe(format!("utterance too long: {surface:?}")));
        }
        for (i, w) in words.iter().enumerate() {
            ids[u * MAX_UTTERANCE_WORDS + i] = lookup(w)?;
        }
    }
    let senses = [&record.vision, &record.inference, &record.taste, &record.hunger, &record.desire];
    for (i, t) in senses.into_iter().enumerate() {
        ids[2 * MAX_UTTERANCE_WORDS + i] = lookup(t)?;
    }
    Ok(ids)
}

fn last_word(ids: &[usize], pad: usize, cur: bool) -> Option<usize> {
    let start = if cur { MAX_UTTERANCE_WORDS } else { 0 };
    (start..start + MAX_UTTERANCE_WORDS).rev().find(|&p| ids[p] != pad)
}

/// Runs a checkpoint on one chunk and reports the ranked predictions at
/// every masked position together with all attention maps.
pub fn probe(
    scenario: &Scenario,
    checkpoint: &Path,
    record: &ChunkRecord,
    mask: &MaskSpec,
    top_k: usize,
) -> Result<ProbeReport, CliError> {
    let (model, _): (EncoderModel, _) = load_checkpoint(checkpoint)?;
    if model.config().vocab_size != scenario.vocab().len() {
        return Err(CliError::Probe(format!(
            "checkpoint vocabulary has {} tokens, scenario has {}",
            model.config().vocab_size,
            scenario.vocab().len()
        )));
    }
    let vocab = scenario.vocab();
    let mut ids = encode_lenient(scenario, record)?;
    let mask_id = vocab.mask_id();
    let extra: Vec<usize> = match mask {
        MaskSpec::Record => Vec::new(),
        MaskSpec::Particle { cur } => vec![last_word(&ids, vocab.pad_id(), *cur)
            .ok_or_else(|| CliError::Probe("utterance is empty".into()))?],
        MaskSpec::Positions(p) => p.clone(),
    };
    for &p in &extra {
        if p >= SEQ_LEN {
            return Err(CliError::Probe(format!("position {p} is outside 0..{SEQ_LEN}")));
        }
        ids[p] = mask_id;
    }
    let mask_positions: Vec<usize> = (0..SEQ_LEN).filter(|&p| ids[p] == mask_id).collect();
    if mask_positions.is_empty() {
        return Err(CliError::Probe(format!("nothing to predict: no {MASK} in the input")));
    }
    let example = MaskedExample {
        token_ids: ids.clone(),
        slot_ids: SLOT_IDS.to_vec(),
        target_ids: mask_positions.iter().map(|_| mask_id).collect(),
        mask_positions,
        forced: false,
    };
    let predictions = model
        .predict_masked(&example)?
        .into_iter()
        .map(|p| {
            let max = p.ranked[0].1;
            let z: f64 = p.ranked.iter().map(|(_, l)| (l - max).exp()).sum();
            let ranked = p
                .ranked
                .iter()
                .take(top_k)
                .map(|&(id, l)| (vocab.token(id).unwrap_or("?").to_string(), (l - max).exp() / z))
                .collect();
            (p.position, ranked)
        })
        .collect();
    let (_, attention) = model.encode(&ids, &SLOT_IDS)?;
    let tokens = ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?").to_string())
        .collect();
    Ok(ProbeReport {
        tokens,
        predictions,
        attention,
    })
}
