//! Python module `smlab`: the scenario, the encoder model, the seeded RNG
//! and single training trials. Structured results come back as plain
//! Python dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use smlab_core::experiment::{label_question, run_trial, CheckpointSchedule, NoStore, TrainConfig};
use smlab_core::model::{init_model, load_checkpoint, save_checkpoint, EncoderModel, ModelConfig};
use smlab_core::numkernel::{derive_seed, AdamConfig, AdamState};
use smlab_core::scenario::{ChunkRecord, ScenarioConfig, UtteranceSlot, SLOT_IDS};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// SplitMix64 generator used for every random draw in the library.
#[pyclass(module = "smlab")]
struct Rng(smlab_core::numkernel::Rng);

#[pymethods]
impl Rng {
    #[new]
    fn new(seed: u64) -> Self {
        Rng(smlab_core::numkernel::Rng::new(seed))
    }

    fn uniform(&mut self) -> f64 {
        self.0.uniform()
    }

    fn below(&mut self, n: usize) -> PyResult<usize> {
        if n == 0 {
            return Err(PyValueError::new_err("n must be positive"));
        }
        Ok(self.0.below(n))
    }

    fn normal(&mut self) -> f64 {
        self.0.normal()
    }
}

/// The closed world: vocabulary, chunk universe and consistency rules.
#[pyclass(module = "smlab")]
struct Scenario(smlab_core::scenario::Scenario);

impl Scenario {
    fn chunk(&self, py: Python<'_>, record: &Bound<'_, PyAny>) -> PyResult<smlab_core::scenario::Chunk> {
        let record: ChunkRecord = from_py(py, record)?;
        record.to_chunk(&self.0).map_err(value_err)
    }
}

#[pymethods]
impl Scenario {
    /// `path` is a scenario TOML file; the built-in scenario is used if omitted.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let config = match path {
            Some(p) => ScenarioConfig::load(&p).map_err(value_err)?,
            None => ScenarioConfig::default(),
        };
        smlab_core::scenario::Scenario::new(config).map(Scenario).map_err(value_err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.fingerprint().to_string()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.0.vocab().tokens().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.universe().len()
    }

    /// `(ne, yo)` counts over final particles in the universe.
    fn particle_counts(&self) -> (usize, usize) {
        let c = self.0.particle_counts();
        (c.ne, c.yo)
    }

    fn universe<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let records: Vec<ChunkRecord> = self.0.universe().iter().map(ChunkRecord::from_chunk).collect();
        to_py(py, &records)
    }

    /// Dict with `sample`, `train` and `test` lists of chunk records.
    fn sample_split<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let split = self.0.sample_split(seed).map_err(value_err)?;
        let rec = |c: &[smlab_core::scenario::Chunk]| c.iter().map(ChunkRecord::from_chunk).collect::<Vec<_>>();
        to_py(
            py,
            &serde_json::json!({
                "sample": rec(&split.sample),
                "train": rec(&split.train),
                "test": rec(&split.test),
            }),
        )
    }

    fn is_consistent(&self, py: Python<'_>, record: &Bound<'_, PyAny>) -> PyResult<bool> {
        let record: ChunkRecord = from_py(py, record)?;
        Ok(record.to_chunk(&self.0).is_ok())
    }

    /// Token ids of a consistent chunk record (11 positions).
    fn encode(&self, py: Python<'_>, record: &Bound<'_, PyAny>) -> PyResult<Vec<usize>> {
        Ok(self.0.encode_chunk(&self.chunk(py, record)?).token_ids.to_vec())
    }

    /// Particles accepted at the end of the `prev` or `cur` utterance.
    fn correct_particles(&self, py: Python<'_>, record: &Bound<'_, PyAny>, slot: &str) -> PyResult<Vec<&'static str>> {
        let slot = match slot {
            "prev" => UtteranceSlot::Prev,
            "cur" => UtteranceSlot::Cur,
            _ => return Err(PyValueError::new_err("slot must be 'prev' or 'cur'")),
        };
        let set = label_question(self.0.config(), &self.chunk(py, record)?, slot);
        let mut out = Vec::new();
        if set.yo {
            out.push("yo");
        }
        if set.ne {
            out.push("ne");
        }
        Ok(out)
    }
}

/// The self-attention encoder with its tied MLM head.
#[pyclass(module = "smlab")]
struct Model(EncoderModel);

#[pymethods]
impl Model {
    /// Keyword arguments override fields of the default model config.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut config = serde_json::to_value(ModelConfig::default()).map_err(value_err)?;
        if let Some(kw) = kwargs {
            let overrides: serde_json::Map<String, serde_json::Value> = from_py(py, kw.as_any())?;
            let obj = config.as_object_mut().expect("config is an object");
            for (k, v) in overrides {
                if !obj.contains_key(&k) {
                    return Err(PyValueError::new_err(format!("unknown model option {k:?}")));
                }
                obj.insert(k, v);
            }
        }
        let config: ModelConfig = serde_json::from_value(config).map_err(value_err)?;
        init_model(&config).map(Model).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = load_checkpoint(&path).map_err(value_err)?;
        Ok(Model(model))
    }

    /// Writes the weights with fresh optimizer moments.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let adam = AdamState::new(AdamConfig::default(), self.0.params());
        save_checkpoint(&self.0, &adam, &path).map_err(value_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.config())
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// For each masked position, `(token id, logit)` pairs best first.
    fn predict(&self, token_ids: Vec<usize>, mask_positions: Vec<usize>) -> PyResult<Vec<Vec<(usize, f64)>>> {
        if let Some(&p) = mask_positions.iter().find(|&&p| p >= token_ids.len()) {
            return Err(PyIndexError::new_err(format!("mask position {p} out of range")));
        }
        let example = smlab_core::scenario::MaskedExample {
            target_ids: mask_positions.iter().map(|&p| token_ids[p]).collect(),
            token_ids,
            slot_ids: SLOT_IDS.to_vec(),
            mask_positions,
            forced: false,
        };
        let preds = self.0.predict_masked(&example).map_err(value_err)?;
        Ok(preds.into_iter().map(|p| p.ranked).collect())
    }

    /// Attention weights indexed `[layer][head][query][key]`.
    fn attention(&self, token_ids: Vec<usize>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let (_, maps) = self.0.encode(&token_ids, &SLOT_IDS).map_err(value_err)?;
        Ok((0..maps.n_layers())
            .map(|l| {
                (0..maps.n_heads())
                    .map(|h| (0..maps.seq_len()).map(|q| maps.row(l, h, q).to_vec()).collect())
                    .collect()
            })
            .collect())
    }
}

/// Trains one trial and returns its per-checkpoint evaluations.
#[pyfunction]
#[pyo3(signature = (seed, schedule="1,2,4,8", lr=1e-4, d_model=64, scenario=None))]
fn train_trial<'py>(
    py: Python<'py>,
    seed: u64,
    schedule: &str,
    lr: f64,
    d_model: usize,
    scenario: Option<PyRef<'_, Scenario>>,
) -> PyResult<Bound<'py, PyAny>> {
    let owned;
    let scenario = match &scenario {
        Some(s) => &s.0,
        None => {
            owned = smlab_core::scenario::Scenario::new(ScenarioConfig::default()).map_err(value_err)?;
            &owned
        }
    };
    let model = ModelConfig {
        d_model,
        vocab_size: scenario.vocab().len(),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        lr,
        schedule: CheckpointSchedule::parse(schedule).map_err(value_err)?,
        ..TrainConfig::default()
    };
    let result = py
        .detach(|| run_trial(scenario, &model, &train, seed, &NoStore))
        .map_err(value_err)?;
    to_py(py, &result)
}

#[pyfunction(name = "derive_seed")]
fn py_derive_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream)
}

#[pymodule]
fn smlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Rng>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_trial, m)?)?;
    m.add_function(wrap_pyfunction!(py_derive_seed, m)?)?;
    Ok(())
}
