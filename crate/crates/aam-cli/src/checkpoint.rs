//! Binary checkpoint container: model config, optimizer state, every
//! parameter tensor with its shape, the frozen reference snapshot, and
//! the training-corpus fingerprint. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use aam_core::model::{ModelConfig, ModelParams, ReferenceSnapshot};
use aam_core::tensor::Tensor;
use aam_core::trainer::TrainState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"AAMCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn contract(msg: String) -> CliError {
    CliError::Core(aam_core::Error::Contract(msg))
}

fn write_tensors(out: &mut impl Write, params: &ModelParams) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    params.for_each(&mut |name, t| entries.push((name, t)));
    out.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, t) in entries {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_tensors(input: &mut impl Read, cfg: ModelConfig) -> Result<ModelParams> {
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = input.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| contract("checkpoint tensor name is not UTF-8".into()))?;
        let rank = input.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(input.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0; numel];
        input.read_f64_into::<LittleEndian>(&mut data)?;
        stored.insert(name, (dims, data));
    }

    let mut params = ModelParams::init(cfg)?;
    let mut failure: Option<String> = None;
    params.for_each_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            None => failure = Some(format!("checkpoint is missing tensor `{name}`")),
            Some((dims, _)) if dims != t.shape() => {
                failure = Some(format!(
                    "shape error: tensor `{name}` has shape {dims:?} in the checkpoint but the config implies {:?}",
                    t.shape()
                ))
            }
            Some((_, data)) => t.data_mut().copy_from_slice(&data),
        }
    });
    if let Some(msg) = failure {
        return Err(contract(msg));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(contract(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, state: &TrainState, train_fingerprint: Option<u64>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;

    let cfg = state.model.cfg;
    for v in [
        cfg.vocab_size as u64,
        cfg.context_len as u64,
        cfg.d_model as u64,
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.seed,
    ] {
        out.write_u64::<LittleEndian>(v)?;
    }

    out.write_u64::<LittleEndian>(state.step as u64)?;
    out.write_u64::<LittleEndian>(state.m.len() as u64)?;
    for &v in &state.m {
        out.write_f64::<LittleEndian>(v)?;
    }
    for &v in &state.v {
        out.write_f64::<LittleEndian>(v)?;
    }

    write_tensors(&mut out, &state.model)?;

    match &state.reference {
        Some(reference) => {
            out.write_u8(1)?;
            write_tensors(&mut out, reference.params())?;
        }
        None => out.write_u8(0)?,
    }

    match train_fingerprint {
        Some(fp) => {
            out.write_u8(1)?;
            out.write_u64::<LittleEndian>(fp)?;
        }
        None => out.write_u8(0)?,
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, Option<u64>)> {
    let file = std::fs::File::open(path).map_err(|e| {
        CliError::Config(format!("cannot open checkpoint `{}`: {e}", path.display()))
    })?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(contract(format!("`{}` is not a checkpoint file", path.display())));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(contract(format!(
            "checkpoint version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }

    let mut raw = [0u64; 6];
    for v in raw.iter_mut() {
        *v = input.read_u64::<LittleEndian>()?;
    }
    let cfg = ModelConfig {
        vocab_size: raw[0] as usize,
        context_len: raw[1] as usize,
        d_model: raw[2] as usize,
        n_layers: raw[3] as usize,
        n_heads: raw[4] as usize,
        seed: raw[5],
    };
    cfg.validate()?;

    let step = input.read_u64::<LittleEndian>()? as usize;
    let n = input.read_u64::<LittleEndian>()? as usize;
    let mut m = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut m)?;
    let mut v = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut v)?;

    let model = read_tensors(&mut input, cfg)?;
    if model.num_params() != n {
        return Err(contract(format!(
            "moment length {n} does not match {} parameters",
            model.num_params()
        )));
    }

    let reference = match input.read_u8()? {
        0 => None,
        1 => Some(ReferenceSnapshot::from_params(read_tensors(&mut input, cfg)?)),
        other => return Err(contract(format!("bad reference flag {other}"))),
    };
    let train_fingerprint = match input.read_u8()? {
        0 => None,
        1 => Some(input.read_u64::<LittleEndian>()?),
        other => return Err(contract(format!("bad fingerprint flag {other}"))),
    };

    Ok((TrainState { step, model, m, v, reference }, train_fingerprint))
}
