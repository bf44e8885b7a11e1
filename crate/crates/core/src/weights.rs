//! Binary weight files.
//!
//! Layout (little-endian): magic `FDWN`, version `u32`, eight `u32` config
//! fields (scale, channels, wide, groups, blocks, attention groups, shuffle
//! groups, ablation bits), tensor count `u32`, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` rank, `u32` dims and raw `f32` data.
//! Version 2 files append a training-state block after the tensors.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Ablation, Fdiwn, FdiwnConfig};
use crate::params::{dims_to_shape, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDWN";
pub const VERSION_WEIGHTS: u32 = 1;
pub const VERSION_CHECKPOINT: u32 = 2;
const TRAIN_MAGIC: &[u8; 4] = b"TRST";

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Optimizer and sampler state stored alongside checkpoint weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub lr: f64,
    pub rng: RngState,
    /// First moments, one per parameter in parameter order.
    pub m: Vec<Tensor<f32>>,
    /// Second moments, one per parameter in parameter order.
    pub v: Vec<Tensor<f32>>,
}

/// Decoded contents of a weight file.
#[derive(Clone, Debug)]
pub struct WeightFile {
    pub config: FdiwnConfig,
    pub params: ModelParams<f32>,
    pub training: Option<TrainingState>,
}

pub fn encode(config: &FdiwnConfig, params: &ModelParams<f32>, training: Option<&TrainingState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.count());
    out.extend_from_slice(MAGIC);
    let version = if training.is_some() { VERSION_CHECKPOINT } else { VERSION_WEIGHTS };
    put_u32(&mut out, version);
    for field in config_fields(config) {
        put_u32(&mut out, field);
    }
    put_u32(&mut out, params.len() as u32);
    for (name, p) in params.iter() {
        put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name.as_bytes());
        out.push(p.dims.len() as u8);
        for &d in &p.dims {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, p.tensor.data());
    }
    if let Some(state) = training {
        out.extend_from_slice(TRAIN_MAGIC);
        out.extend_from_slice(&state.step.to_le_bytes());
        out.extend_from_slice(&state.lr.to_le_bytes());
        out.extend_from_slice(&state.rng.seed);
        out.extend_from_slice(&state.rng.stream.to_le_bytes());
        out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
        put_u32(&mut out, state.m.len() as u32);
        for t in state.m.iter().chain(&state.v) {
            put_f32s(&mut out, t.data());
        }
    }
    out
}

/// Parameters-only encoding.
pub fn serialize_params(config: &FdiwnConfig, params: &ModelParams<f32>) -> Vec<u8> {
    encode(config, params, None)
}

/// Decode and check that the tensors match the layout of the stored config.
pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a weight file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION_WEIGHTS && version != VERSION_CHECKPOINT {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut f = [0u32; 8];
    for (i, v) in f.iter_mut().enumerate() {
        *v = r.u32(CONFIG_FIELDS[i])?;
    }
    let config = FdiwnConfig {
        scale: f[0] as usize,
        channels: f[1] as usize,
        wide: f[2] as usize,
        n_groups: f[3] as usize,
        n_blocks: f[4] as usize,
        sa_groups: f[5] as usize,
        cgs_groups: f[6] as usize,
        ablation: Ablation::from_bits(f[7])?,
    };
    config.validate()?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ModelParams::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let shape = dims_to_shape(&dims).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        let data = r.f32s(shape.numel(), &name)?;
        params.insert(name, dims, Tensor::new(shape, data)?)?;
    }
    Fdiwn::from_params(config, &params)?;
    let training = match version {
        VERSION_CHECKPOINT => Some(read_training(&mut r, &params)?),
        _ => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(WeightFile { config, params, training })
}

/// Decode weights that must belong to `expected`.
pub fn deserialize_params(bytes: &[u8], expected: &FdiwnConfig) -> Result<ModelParams<f32>> {
    let file = decode(bytes)?;
    if file.config != *expected {
        return Err(Error::Config(format!("weights are for [{}], expected [{expected}]", file.config)));
    }
    Ok(file.params)
}

pub fn save(path: &Path, config: &FdiwnConfig, params: &ModelParams<f32>, training: Option<&TrainingState>) -> Result<()> {
    fs::write(path, encode(config, params, training)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<WeightFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

const CONFIG_FIELDS: [&str; 8] =
    ["scale", "channels", "wide", "n_groups", "n_blocks", "sa_groups", "cgs_groups", "ablation"];

fn config_fields(c: &FdiwnConfig) -> [u32; 8] {
    [
        c.scale as u32,
        c.channels as u32,
        c.wide as u32,
        c.n_groups as u32,
        c.n_blocks as u32,
        c.sa_groups as u32,
        c.cgs_groups as u32,
        c.ablation.bits(),
    ]
}

fn read_training(r: &mut Reader<'_>, params: &ModelParams<f32>) -> Result<TrainingState> {
    if r.take(4, "training block")? != TRAIN_MAGIC {
        return Err(Error::Format("missing training-state block".into()));
    }
    let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
    let lr = f64::from_le_bytes(r.take(8, "learning rate")?.try_into().unwrap());
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = u64::from_le_bytes(r.take(8, "rng stream")?.try_into().unwrap());
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let n = r.u32("moment count")? as usize;
    if n != params.len() {
        return Err(Error::Format(format!("{n} moment tensors for {} parameters", params.len())));
    }
    let mut moments = Vec::with_capacity(2 * n);
    for kind in ["m", "v"] {
        for (name, p) in params.iter() {
            let data = r.f32s(p.tensor.numel(), &format!("{kind}[{name}]"))?;
            moments.push(Tensor::new(p.tensor.shape(), data)?);
        }
    }
    let v = moments.split_off(n);
    Ok(TrainingState { step, lr, rng: RngState { seed, stream, word_pos }, m: moments, v })
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
