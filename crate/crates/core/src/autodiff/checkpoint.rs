//! Binary checkpoints: `SQCK`, version, JSON header length, JSON header,
//! little-endian f32 tensor data, CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimState, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQCK";
const VERSION: u32 = 1;
const MOMENT_PREFIX: [&str; 2] = ["adam.m/", "adam.v/"];

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed RNG state".into());
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimState<f32>>,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data: Vec<&[f32]> = Vec::new();
    for p in ck.params.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            trainable: p.trainable,
        });
        data.push(&p.value.data);
    }
    if let Some(opt) = &ck.optimizer {
        if opt.m.len() != ck.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (prefix, moments) in MOMENT_PREFIX.iter().zip([&opt.m, &opt.v]) {
            for (p, m) in ck.params.iter().zip(moments) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", p.name),
                    shape: p.value.shape.clone(),
                    trainable: false,
                });
                data.push(m);
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        tensors: entries,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.t),
        rng: ck.rng.clone(),
        meta: ck.meta.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for d in data {
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[16..hend])?;
    let mut pos = hend;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = pos + n * 4;
        if end > body.len() {
            return Err(bad("truncated tensor data"));
        }
        let data: Vec<f32> = body[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        if e.name.starts_with(MOMENT_PREFIX[0]) {
            m.push(data);
        } else if e.name.starts_with(MOMENT_PREFIX[1]) {
            v.push(data);
        } else {
            params.add(&e.name, Tensor::new(e.shape, data)?, e.trainable);
        }
    }
    if pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    let optimizer = match header.optimizer_step {
        Some(t) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(bad("incomplete optimizer moments"));
            }
            Some(OptimState { t, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        params,
        optimizer,
        rng: header.rng,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_with_optimizer_and_rng() {
        let mut params = ParamStore::new();
        params.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), true);
        params.add("bn.running_var", Tensor::full(vec![3], 1.0), false);
        let mut opt = OptimState::new(&params);
        opt.t = 7;
        opt.m[0][1] = 0.5;
        opt.v[1][2] = 0.125;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            params,
            optimizer: Some(opt),
            rng: Some(RngState::capture(&rng)),
            meta: serde_json::json!({"epoch": 4}),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.meta["epoch"], 4);
        let mut r2 = back.rng.unwrap().restore().unwrap();
        assert_eq!(rng.random::<u64>(), r2.random::<u64>());

        let mut bad = bytes.clone();
        let k = bad.len() - 10;
        bad[k] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum(_))));
    }
}
