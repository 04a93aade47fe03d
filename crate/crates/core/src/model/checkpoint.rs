//! Checkpoint layout: `BGPT1`, u32 LE header length, JSON header, then each
//! tensor as little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"BGPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<Value>,
}

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes `params`; `train` is stored verbatim in the header.
pub fn write_checkpoint(mut w: impl Write, params: &ModelParams, train: Option<&Value>) -> Result<()> {
    let tensors = params.tensors();
    let header = Header {
        config: params.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC).map_err(ck)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(ck)?;
    w.write_all(&json).map_err(ck)?;
    for (_, t) in &tensors {
        for &x in t.iter() {
            w.write_all(&(x as f32).to_le_bytes()).map_err(ck)?;
        }
    }
    w.flush().map_err(ck)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ModelParams, Option<Value>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(ck)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(ck)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;

    let mut params = ModelParams::zeros(header.config)?;
    let mut slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    let mut buf = [0u8; 4];
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        for x in slot.iter_mut() {
            r.read_exact(&mut buf).map_err(ck)?;
            *x = f32::from_le_bytes(buf) as f64;
        }
    }
    drop(slots);
    if r.read(&mut buf).map_err(ck)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((params, header.train))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, train: Option<&Value>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params, train)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Option<Value>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

impl ModelParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(config, &mut rng)?;
        for (_, mut t) in p.tensors_mut() {
            t.fill(0.0);
        }
        Ok(p)
    }
}
