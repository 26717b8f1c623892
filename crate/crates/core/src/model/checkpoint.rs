//! Self-describing binary checkpoint container.
//!
//! Layout: magic, format version, a JSON header (config, step counter, rng
//! state), then named f32 tensors in little-endian byte order — parameters
//! first, optionally followed by Adam moment tensors. Tensor bytes are
//! written verbatim, so a save/load cycle is bit-exact.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig, AdamSlot};

use super::{ModelConfig, UNet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MFCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    train_step: u64,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<(String, ArrayD<f32>)>,
    pub v: Vec<(String, ArrayD<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub params: Vec<(String, ArrayD<f32>)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &UNet<f32>,
        train_step: u64,
        rng_seed: u64,
        rng_word_pos: u128,
    ) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |name, value| {
            params.push((name.to_string(), value.to_owned()));
        });
        Checkpoint { config: model.cfg.clone(), train_step, rng_seed, rng_word_pos, params, adam: None }
    }

    pub fn with_adam(mut self, adam: &Adam<f32>) -> Self {
        let m = adam.slots.iter().map(|s| (s.name.clone(), s.m.clone())).collect();
        let v = adam.slots.iter().map(|s| (s.name.clone(), s.v.clone())).collect();
        self.adam = Some(AdamState { step: adam.step, m, v });
        self
    }

    /// Rebuild the model carried by this checkpoint.
    pub fn restore_model(&self) -> Result<UNet<f32>> {
        let mut model = UNet::build(self.config.clone(), 0)?;
        let map: HashMap<&str, &ArrayD<f32>> =
            self.params.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut missing = Vec::new();
        let mut used = 0usize;
        model.visit_params_mut(&mut |name, mut value, _grad| match map.get(name) {
            Some(stored) => {
                if stored.shape() == value.shape() {
                    value.assign(stored);
                    used += 1;
                } else {
                    missing.push(format!("{name} (shape mismatch)"));
                }
            }
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {missing:?}")));
        }
        if used != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model consumed {used}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn restore_adam(&self) -> Option<Adam<f32>> {
        let state = self.adam.as_ref()?;
        let slots = state
            .m
            .iter()
            .zip(&state.v)
            .map(|((name, m), (_, v))| AdamSlot { name: name.clone(), m: m.clone(), v: v.clone() })
            .collect();
        Some(Adam { cfg: AdamConfig::default(), step: state.step, slots })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            train_step: self.train_step,
            rng_seed: self.rng_seed,
            rng_word_pos_hi: (self.rng_word_pos >> 64) as u64,
            rng_word_pos_lo: self.rng_word_pos as u64,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(&mut w, &self.params)?;
        match &self.adam {
            Some(adam) => {
                w.write_all(&[1u8])?;
                w.write_all(&adam.step.to_le_bytes())?;
                write_tensors(&mut w, &adam.m)?;
                write_tensors(&mut w, &adam.v)?;
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let json_len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let params = read_tensors(&mut r)?;
        let mut has_adam = [0u8; 1];
        r.read_exact(&mut has_adam)?;
        let adam = if has_adam[0] == 1 {
            let step = read_u64(&mut r)?;
            let m = read_tensors(&mut r)?;
            let v = read_tensors(&mut r)?;
            Some(AdamState { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            config: header.config,
            train_step: header.train_step,
            rng_seed: header.rng_seed,
            rng_word_pos: ((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128,
            params,
            adam,
        })
    }
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, ArrayD<f32>)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
