//! Line-oriented dataset files: a `#` header line followed by one JSON
//! object per chunk.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rules::Chunk;
use super::{Scenario, ScenarioError, SenseState, Utterance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub prev: String,
    pub cur: String,
    pub vision: String,
    pub inference: String,
    pub taste: String,
    pub hunger: String,
    pub desire: String,
}

impl ChunkRecord {
    pub fn from_chunk(chunk: &Chunk) -> Self {
        let [vision, inference, taste, hunger, desire] = chunk.senses.tokens().map(String::from);
        ChunkRecord {
            prev: chunk.prev.surface().to_string(),
            cur: chunk.cur.surface().to_string(),
            vision,
            inference,
            taste,
            hunger,
            desire,
        }
    }

    /// Parses and checks the record against the scenario's rules.
    pub fn to_chunk(&self, scenario: &Scenario) -> Result<Chunk, ScenarioError> {
        let senses = SenseState::from_tokens([
            &self.vision,
            &self.inference,
            &self.taste,
            &self.hunger,
            &self.desire,
        ])
        .ok_or_else(|| ScenarioError::Record("unknown sense token".into()))?;
        scenario.tokenize_utterance(&self.prev)?;
        scenario.tokenize_utterance(&self.cur)?;
        let chunk = Chunk {
            prev: Utterance::parse(&self.prev),
            cur: Utterance::parse(&self.cur),
            senses,
        };
        let violations = scenario.consistency_check(&chunk);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(ScenarioError::Record(format!(
                "inconsistent chunk: {}",
                list.join(", ")
            )));
        }
        Ok(chunk)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub role: String,
    pub seed: u64,
    pub fingerprint: String,
}

impl DatasetHeader {
    fn line(&self, count: usize) -> String {
        format!(
            "# smlab-dataset role={} seed={} fingerprint={} count={}",
            self.role, self.seed, self.fingerprint, count
        )
    }

    fn parse(line: &str) -> Option<(DatasetHeader, usize)> {
        let rest = line.strip_prefix("# smlab-dataset ")?;
        let mut role = None;
        let mut seed = None;
        let mut fingerprint = None;
        let mut count = None;
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "role" => role = Some(v.to_string()),
                "seed" => seed = v.parse().ok(),
                "fingerprint" => fingerprint = Some(v.to_string()),
                "count" => count = v.parse().ok(),
                _ => {}
            }
        }
        Some((
            DatasetHeader {
                role: role?,
                seed: seed?,
                fingerprint: fingerprint?,
            },
            count?,
        ))
    }
}

pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, chunks: &[Chunk]) -> std::io::Result<()> {
    writeln!(out, "{}", header.line(chunks.len()))?;
    for chunk in chunks {
        let json = serde_json::to_string(&ChunkRecord::from_chunk(chunk))?;
        writeln!(out, "{json}")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, chunks: &[Chunk]) -> Result<(), ScenarioError> {
    let file = std::fs::File::create(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&mut w, header, chunks)
        .and_then(|_| w.flush())
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
}

pub fn read_dataset<R: BufRead>(input: R, scenario: &Scenario) -> Result<(DatasetHeader, Vec<Chunk>), ScenarioError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| ScenarioError::Record("empty dataset file".into()))?
        .map_err(|e| ScenarioError::Io(e.to_string()))?;
    let (header, count) =
        DatasetHeader::parse(&first).ok_or_else(|| ScenarioError::Record("missing dataset header".into()))?;
    let mut chunks = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| ScenarioError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ChunkRecord = serde_json::from_str(&line)
            .map_err(|e| ScenarioError::Record(format!("line {}: {e}", i + 2)))?;
        chunks.push(record.to_chunk(scenario)?);
    }
    if chunks.len() != count {
        return Err(ScenarioError::Record(format!(
            "header announces {count} records, found {}",
            chunks.len()
        )));
    }
    Ok((header, chunks))
}

pub fn load_dataset(path: &Path, scenario: &Scenario) -> Result<(DatasetHeader, Vec<Chunk>), ScenarioError> {
    let file = std::fs::File::open(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file), scenario)
}
