//! Binary point-cloud files.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size      | field                                          |
//! |--------|-----------|------------------------------------------------|
//! | 0      | 4         | magic `SHCL`                                   |
//! | 4      | 4         | `u32` format version (1)                       |
//! | 8      | 4         | `u32` point count N                            |
//! | 12     | 4         | `u32` feature width C                          |
//! | 16     | 1         | `u8` label mode: 0 none, 1 per cloud, 2 per point |
//! | 17     | 3         | zero padding                                   |
//! | 20     | 12·N      | `f32` coordinates, x y z per point             |
//! | ...    | 4·N·C     | `f32` features, row-major                      |
//! | ...    | 0, 4, 4·N | `u32` labels for modes 0, 1, 2                 |
//!
//! Nothing may follow the labels.

use std::path::Path;

use ndarray::Array2;

use super::DataError;
use crate::geometry::{Labels, PointCloud};

pub const MAGIC: [u8; 4] = *b"SHCL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let c = cloud.feature_width();
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * n + 4 * n * c + 4 * n);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    let mode: u8 = match cloud.labels() {
        Labels::None => 0,
        Labels::Cloud(_) => 1,
        Labels::Points(_) => 2,
    };
    out.extend_from_slice(&[mode, 0, 0, 0]);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(f) = cloud.features() {
        for v in f.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match cloud.labels() {
        Labels::None => {}
        Labels::Cloud(l) => out.extend_from_slice(&l.to_le_bytes()),
        Labels::Points(ls) => {
            for l in ls {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], DataError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(DataError::Truncated {
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

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let header = r.take(4)?;
    let mode = header[0];
    if mode > 2 {
        return Err(DataError::Format(format!("unknown label mode {mode}")));
    }
    if header[1..] != [0, 0, 0] {
        return Err(DataError::Format("nonzero header padding".into()));
    }
    let label_words = [0, 1, n][mode as usize];
    let expected = (n as u128) * 12 + (n as u128) * (c as u128) * 4 + (label_words as u128) * 4;
    let remaining = (bytes.len() - HEADER_LEN) as u128;
    if remaining < expected {
        return Err(DataError::Truncated {
            needed: (HEADER_LEN as u128 + expected).min(usize::MAX as u128) as usize,
            found: bytes.len(),
        });
    }
    if remaining > expected {
        return Err(DataError::TrailingBytes((remaining - expected) as usize));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let mut cloud = PointCloud::new(points)?;
    if c > 0 {
        let mut values = Vec::with_capacity(n * c);
        for _ in 0..n * c {
            values.push(r.f32()?);
        }
        let f = Array2::from_shape_vec((n, c), values).expect("feature shape");
        cloud = cloud.with_features(f)?;
    }
    let labels = match mode {
        0 => Labels::None,
        1 => Labels::Cloud(r.u32()?),
        _ => Labels::Points((0..n).map(|_| r.u32()).collect::<Result<_, _>>()?),
    };
    Ok(cloud.with_labels(labels)?)
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_cloud(cloud)).map_err(|e| DataError::io(path, e))
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_cloud(&bytes)
}
