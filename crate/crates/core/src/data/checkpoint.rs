//! Checkpoint files: configuration, weights, optimizer moments, sampling
//! stream position and metrics history, each in a checksummed section.
//!
//! Layout (little-endian):
//!
//! | field          | size | notes                                  |
//! |----------------|------|----------------------------------------|
//! | magic `SHCK`   | 4    |                                        |
//! | version        | 4    | `u32`, currently 1                     |
//! | section count  | 4    | `u32`, currently 5                     |
//! | sections       | ...  | `CONF`, `WGTS`, `OPTM`, `RNGS`, `METR` |
//!
//! Every section is a 4-byte tag, a `u64` payload length, the payload and
//! the CRC-32 (IEEE) of the payload as `u32`.
//!
//! * `CONF`: JSON `{"precision", "network", "train"}`.
//! * `WGTS`: `u32` tensor count, then per tensor a `u32` name length, the
//!   UTF-8 name, a `u32` rank, `u64` dims and the values.
//! * `OPTM`: `u64` Adam step, then first moments and second moments, each
//!   as `u32` count followed by rank, dims and values per tensor.
//! * `RNGS`: `u64` base seed and `u64` completed epochs; every training
//!   stream is derived from these two numbers.
//! * `METR`: JSON array of per-epoch metrics.
//!
//! Values use the precision named in `CONF` (4 or 8 bytes).

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::Real;
use crate::network::{Network, NetworkConfig};
use crate::training::{AdamState, EpochMetrics, TrainConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"SHCK";
pub const VERSION: u32 = 1;
const TAGS: [&[u8; 4]; 5] = [b"CONF", b"WGTS", b"OPTM", b"RNGS", b"METR"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Conf {
    precision: String,
    network: NetworkConfig,
    train: TrainConfig,
}

/// Alias kept for readability at call sites that only need the network.
pub type Checkpoint<T> = Trainer<T>;

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &ArrayD<T>) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.iter() {
        v.write_le(out);
    }
}

fn put_tensors<T: Real>(out: &mut Vec<u8>, ts: &[ArrayD<T>]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        put_tensor(out, t);
    }
}

pub fn encode_checkpoint<T: Real>(t: &Trainer<T>) -> Result<Vec<u8>, DataError> {
    let conf = serde_json::to_vec(&Conf {
        precision: T::NAME.to_string(),
        network: t.net.config().clone(),
        train: t.config.clone(),
    })?;

    let mut weights = Vec::new();
    let store = t.net.params();
    weights.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        weights.extend_from_slice(&(name.len() as u32).to_le_bytes());
        weights.extend_from_slice(name.as_bytes());
        put_tensor(&mut weights, value);
    }

    let mut optim = Vec::new();
    optim.extend_from_slice(&t.adam.step.to_le_bytes());
    put_tensors(&mut optim, &t.adam.m);
    put_tensors(&mut optim, &t.adam.v);

    let mut rngs = Vec::new();
    rngs.extend_from_slice(&t.config.seed.to_le_bytes());
    rngs.extend_from_slice(&(t.epoch as u64).to_le_bytes());

    let metrics = serde_json::to_vec(&t.history)?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(TAGS.len() as u32).to_le_bytes());
    for (tag, payload) in TAGS.iter().zip([conf, weights, optim, rngs, metrics]) {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }
    Ok(out)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint<T: Real>(t: &Trainer<T>, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(t)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| DataError::io(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Trainer<T>, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DataError::Truncated {
                needed: self.pos.saturating_add(len),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, DataError> {
        usize::try_from(self.u64()?).map_err(|_| DataError::Format("length overflow".into()))
    }

    fn tensor<T: Real>(&mut self) -> Result<ArrayD<T>, DataError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(DataError::Format(format!("tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(DataError::Format("tensor size overflow".into()))?;
        let raw = self.take(count.saturating_mul(T::BYTES))?;
        let values = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&dims), values).expect("counted values"))
    }

    fn tensors<T: Real>(&mut self) -> Result<Vec<ArrayD<T>>, DataError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }

    fn done(&self) -> Result<(), DataError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(DataError::TrailingBytes(extra)),
        }
    }
}

fn check_shapes<T: Real>(what: &str, got: &[ArrayD<T>], want: &[ArrayD<T>]) -> Result<(), DataError> {
    if got.len() != want.len() {
        return Err(DataError::Mismatch(format!(
            "{what}: {} tensors, network has {}",
            got.len(),
            want.len()
        )));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        if g.shape() != w.shape() {
            return Err(DataError::Mismatch(format!(
                "{what} {i}: shape {:?}, network expects {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    Ok(())
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Trainer<T>, DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    c.take(4)?;
    let version = c.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    if count != TAGS.len() {
        return Err(DataError::Format(format!("{count} sections, expected {}", TAGS.len())));
    }
    let mut payloads = Vec::with_capacity(count);
    for tag in TAGS {
        let found = c.take(4)?;
        if found != tag.as_slice() {
            return Err(DataError::Format(format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = c.len()?;
        let payload = c.take(len)?;
        let crc = c.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(DataError::Checksum(String::from_utf8_lossy(tag).into_owned()));
        }
        payloads.push(payload);
    }
    c.done()?;

    let conf: Conf = serde_json::from_slice(payloads[0])?;
    if conf.precision != T::NAME {
        return Err(DataError::Precision {
            stored: conf.precision,
            requested: T::NAME,
        });
    }
    let mut net = Network::<T>::build(&conf.network)
        .map_err(|e| DataError::Mismatch(format!("stored configuration: {e}")))?;

    let mut w = Cursor {
        bytes: payloads[1],
        pos: 0,
    };
    let n = w.u32()? as usize;
    let mut names = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let len = w.u32()? as usize;
        let name = std::str::from_utf8(w.take(len)?)
            .map_err(|_| DataError::Format("weight name is not UTF-8".into()))?
            .to_string();
        names.push(name);
        values.push(w.tensor::<T>()?);
    }
    w.done()?;
    if names != net.params().names() {
        return Err(DataError::Mismatch("weight names differ from the configuration".into()));
    }
    check_shapes("weight", &values, net.params().values())?;
    for (dst, src) in net.params_mut().values_mut().iter_mut().zip(values) {
        *dst = src;
    }

    let mut o = Cursor {
        bytes: payloads[2],
        pos: 0,
    };
    let step = o.u64()?;
    let m = o.tensors::<T>()?;
    let v = o.tensors::<T>()?;
    o.done()?;
    check_shapes("first moment", &m, net.params().values())?;
    check_shapes("second moment", &v, net.params().values())?;

    let mut r = Cursor {
        bytes: payloads[3],
        pos: 0,
    };
    let seed = r.u64()?;
    let epoch = r.len()?;
    r.done()?;
    if seed != conf.train.seed {
        return Err(DataError::Mismatch("sampling seed differs from the training seed".into()));
    }

    let history: Vec<EpochMetrics> = serde_json::from_slice(payloads[4])?;
    conf.train
        .validate()
        .map_err(|e| DataError::Mismatch(e.to_string()))?;
    Ok(Trainer {
        net,
        adam: AdamState { step, m, v },
        config: conf.train,
        epoch,
        history,
    })
}
