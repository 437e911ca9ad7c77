//! Binary checkpoint: magic, version, JSON config, shape manifest, `f64` LE
//! parameter and Adam blobs, trailing CRC-32 of everything before it.

use std::io::Write;
use std::path::Path;

use super::{check_layout, EncoderModel, ModelConfig, ModelError};
use crate::numkernel::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SBERTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &EncoderModel, adam: &AdamState) -> Result<Vec<u8>, ModelError> {
    let n = model.params.len();
    if adam.m.len() != n || adam.v.len() != n {
        return Err(ModelError::Format("optimizer state does not match the model".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| ModelError::Format(e.to_string()))?;
    put_u32(&mut buf, config.len());
    buf.extend_from_slice(&config);

    put_u32(&mut buf, n);
    for (name, p) in model.param_names().iter().zip(&model.params) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, p.shape().len());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in &model.params {
        put_f64s(&mut buf, p.data());
    }

    buf.extend_from_slice(&adam.t.to_le_bytes());
    let AdamConfig { lr, beta1, beta2, epsilon } = adam.config;
    put_f64s(&mut buf, &[lr, beta1, beta2, epsilon]);
    for (i, t) in adam.m.iter().chain(&adam.v).enumerate() {
        if t.shape() != model.params[i % n].shape() {
            return Err(ModelError::Format("optimizer moment shape does not match its parameter".into()));
        }
        put_f64s(&mut buf, t.data());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(EncoderModel, AdamState), ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = CHECKPOINT_MAGIC.as_bytes();
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(ModelError::BadMagic {
            expected: CHECKPOINT_MAGIC,
        });
    }
    r.pos = magic.len();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| ModelError::Format(format!("config: {e}")))?;
    config.validate()?;

    let n = r.u32("manifest")? as usize;
    let layout = config.layout();
    let mut shapes = Vec::with_capacity(n.min(layout.len()));
    for i in 0..n {
        let name_len = r.u32("manifest")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "manifest")?).into_owned();
        let rank = r.u32("manifest")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("manifest")? as usize);
        }
        let expected = layout.get(i).map(|(_, s, _)| s.clone()).unwrap_or_default();
        if shape != expected {
            return Err(ModelError::ShapeMismatch {
                name,
                expected,
                found: shape,
            });
        }
        shapes.push(shape);
    }
    if n != layout.len() {
        return Err(ModelError::ShapeMismatch {
            name: "parameter list".into(),
            expected: vec![layout.len()],
            found: vec![n],
        });
    }

    let params = r.tensors(&shapes, "parameters")?;
    let t = r.u64("optimizer")?;
    let hyper = r.f64s(4, "optimizer")?;
    let m = r.tensors(&shapes, "optimizer moments")?;
    let v = r.tensors(&shapes, "optimizer moments")?;

    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_layout(&config, &params)?;
    let adam = AdamState {
        config: AdamConfig {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            epsilon: hyper[3],
        },
        t,
        m,
        v,
    };
    Ok((EncoderModel { config, params }, adam))
}

pub fn save_checkpoint(model: &EncoderModel, adam: &AdamState, path: &Path) -> Result<(), ModelError> {
    let bytes = write_checkpoint(model, adam)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, AdamState), ModelError> {
    read_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless every tensor has the shape
/// `config` implies.
pub fn load_checkpoint_expecting(path: &Path, config: &ModelConfig) -> Result<(EncoderModel, AdamState), ModelError> {
    let (model, adam) = load_checkpoint(path)?;
    let expected = config.layout();
    for ((name, shape, _), p) in expected.iter().zip(model.params()) {
        if p.shape() != shape.as_slice() {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: p.shape().to_vec(),
            });
        }
    }
    if expected.len() != model.params().len() {
        return Err(ModelError::ShapeMismatch {
            name: "parameter list".into(),
            expected: vec![expected.len()],
            found: vec![model.params().len()],
        });
    }
    Ok((model, adam))
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n.checked_mul(8).ok_or(ModelError::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn tensors(&mut self, shapes: &[Vec<usize>], what: &'static str) -> Result<Vec<Tensor>, ModelError> {
        shapes
            .iter()
            .map(|s| Ok(Tensor::new(s, self.f64s(s.iter().product(), what)?)?))
            .collect()
    }
}
