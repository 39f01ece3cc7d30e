//! `LPT1` binary checkpoints: named f64 tensors, little-endian.
//!
//! ```text
//! magic  b"LPT1"
//! u32    tensor count
//! per tensor:  u32 name length, UTF-8 name, u32 rank, u64 × rank dims, u8 dtype (0 = f64)
//! payloads, in header order, each dims.product() little-endian f64
//! ```

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{Backbone, EncoderWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::prompting::{PromptModule, PromptSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPT1";
const DTYPE_F64: u8 = 0;
const CONFIG_NAME: &str = "meta.model_config";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn io_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        bad("truncated file")
    } else {
        bad(e.to_string())
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(*name) {
            return Err(bad(format!("duplicate tensor name {name:?}")));
        }
    }
    let count = u32::try_from(tensors.len()).map_err(|_| bad("too many tensors"))?;
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| bad("tensor name too long"))?;
        header.extend_from_slice(&len.to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.push(DTYPE_F64);
    }
    out.write_all(&header).map_err(io_err)?;
    for (_, t) in tensors {
        let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        out.write_all(&bytes).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"LPT1\"")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(bad(format!("implausible name length {len}")));
        }
        let mut name = vec![0; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        if !seen.insert(name.clone()) {
            return Err(bad(format!("duplicate tensor name {name:?}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut dtype = [0];
        r.read_exact(&mut dtype).map_err(io_err)?;
        if dtype[0] != DTYPE_F64 {
            return Err(bad(format!("tensor {name:?} has unknown dtype tag {}", dtype[0])));
        }
        headers.push((name, dims));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, dims) in headers {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 32)
            .ok_or_else(|| bad(format!("tensor {name:?} has invalid dims {dims:?}")))?;
        let mut bytes = vec![0; n * 8];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    let mut rest = [0];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(bad("trailing bytes after the last payload"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(file), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(file))
}

fn config_tensor(c: &ModelConfig) -> Tensor {
    let v = [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len];
    Tensor::new([6], v.map(|x| x as f64).to_vec()).expect("six entries")
}

/// A backbone checkpoint: the model config (as `meta.model_config`) followed
/// by every encoder tensor.
pub fn backbone_tensors(b: &Backbone) -> Vec<(String, Tensor)> {
    let mut out = vec![(CONFIG_NAME.to_string(), config_tensor(&b.config))];
    out.extend(b.weights.named().into_iter().map(|(n, t)| (n, t.clone())));
    out
}

pub fn save_backbone(path: &Path, b: &Backbone) -> Result<()> {
    let tensors = backbone_tensors(b);
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save(path, &refs)
}

/// Rebuilds a backbone from tensors produced by [`backbone_tensors`].
pub fn backbone_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Backbone> {
    let mut it = tensors.into_iter();
    let (name, meta) = it.next().ok_or_else(|| bad("empty checkpoint"))?;
    if name != CONFIG_NAME || meta.len() != 6 {
        return Err(bad(format!("expected {CONFIG_NAME} first, found {name:?}")));
    }
    let v: Vec<usize> = meta.data().iter().map(|&x| x as usize).collect();
    let config = ModelConfig {
        n_layers: v[0],
        d_model: v[1],
        n_heads: v[2],
        d_ff: v[3],
        vocab_size: v[4],
        max_seq_len: v[5],
    };
    config.validate()?;
    let rest: Vec<(String, Tensor)> = it.collect();
    let fresh = EncoderWeights::init(&config, 0)?;
    let expected: Vec<String> = fresh.named().into_iter().map(|(n, _)| n).collect();
    let names: Vec<&String> = rest.iter().map(|(n, _)| n).collect();
    if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(bad("checkpoint tensors do not match the encoder layout"));
    }
    let weights = EncoderWeights::from_ordered(rest.into_iter().map(|(_, t)| t).collect(), config.n_layers)?;
    Backbone::new(config, weights)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    backbone_from_tensors(load(path)?)
}

/// Saves the trainable tensors of a prompt module under their stable names.
pub fn save_prompt(path: &Path, module: &PromptModule) -> Result<()> {
    let named = module.named();
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    save(path, &refs)
}

pub fn load_prompt(path: &Path, spec: PromptSpec, config: &ModelConfig) -> Result<PromptModule> {
    PromptModule::from_named(spec, config, &load(path)?)
}
