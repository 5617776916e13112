//! Versioned binary checkpoints.
//!
//! A checkpoint captures everything needed to continue training bitwise
//! identically: model and language-model parameters, Adam moments, the
//! optimizer step count, the best validation score so far, and the exact
//! position of the random number generator.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "FESCKPT\0"
//! version      u32
//! config       u32 length + JSON bytes
//! step         u64
//! best_val     f64
//! rng_seed     u64
//! rng_word_pos u128
//! adam_step    u64
//! sections     params, lm_params, adam_m, adam_v
//! ```
//!
//! Each section is a `u32` entry count followed by entries of
//! `u16 name-length, name bytes, u8 rank, rank x u32 dims, numel x f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fes_autodiff::{AdamState, ParamSet, Tensor};

use crate::error::CoreError;
use crate::train::config::TrainConfig;
use crate::train::trainer::TrainState;

const MAGIC: &[u8; 8] = b"FESCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg_json = serde_json::to_vec(cfg)?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;

    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.best_val.to_le_bytes())?;
    w.write_all(&state.rng_seed.to_le_bytes())?;
    w.write_all(&state.rng_word_pos.to_le_bytes())?;
    w.write_all(&state.adam.step.to_le_bytes())?;

    write_param_section(&mut w, &state.params)?;
    write_param_section(&mut w, &state.lm_params)?;
    write_tensor_map(&mut w, &state.adam.m)?;
    write_tensor_map(&mut w, &state.adam.v)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig), CoreError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Data(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }

    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json)?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_json)?;

    let step = read_u64(&mut r)?;
    let best_val = f64::from_le_bytes(read_array(&mut r)?);
    let rng_seed = read_u64(&mut r)?;
    let rng_word_pos = u128::from_le_bytes(read_array(&mut r)?);
    let adam_step = read_u64(&mut r)?;

    let params = read_param_section(&mut r)?;
    let lm_params = read_param_section(&mut r)?;
    let m = read_tensor_map(&mut r)?;
    let v = read_tensor_map(&mut r)?;

    let state = TrainState {
        params,
        lm_params,
        adam: AdamState { step: adam_step, m, v },
        step,
        best_val,
        rng_seed,
        rng_word_pos,
    };
    Ok((state, cfg))
}

fn write_param_section<W: Write>(w: &mut W, params: &ParamSet) -> Result<(), CoreError> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        write_entry(w, name, &p.value)?;
    }
    Ok(())
}

fn write_tensor_map<W: Write>(
    w: &mut W,
    map: &BTreeMap<String, Tensor>,
) -> Result<(), CoreError> {
    w.write_all(&(map.len() as u32).to_le_bytes())?;
    for (name, t) in map {
        write_entry(w, name, t)?;
    }
    Ok(())
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), CoreError> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_param_section<R: Read>(r: &mut R) -> Result<ParamSet, CoreError> {
    let mut params = ParamSet::new();
    for (name, t) in read_entries(r)? {
        params.insert(&name, t);
    }
    Ok(params)
}

fn read_tensor_map<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>, CoreError> {
    Ok(read_entries(r)?.into_iter().collect())
}

fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, CoreError> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CoreError::Data("checkpoint tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CoreError::Data(format!("checkpoint tensor `{name}`: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CoreError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CoreError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CoreError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
