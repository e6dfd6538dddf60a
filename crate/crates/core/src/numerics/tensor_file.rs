//! ZSTR tensor files: magic `ZSTR`, `u32` rank, `u32` dims, then a
//! little-endian `f32` or `f64` payload. The element width is implied by the
//! payload length.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 4] = b"ZSTR";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(invalid!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = match self.data {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
        };
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let word = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| format!("truncated header at byte {at}"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err("bad magic".into());
        }
        let rank = word(4)? as usize;
        let dims = (0..rank)
            .map(|i| word(8 + 4 * i).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let payload = &bytes[8 + 4 * rank..];
        let n: usize = dims.iter().product();
        let data = if payload.len() == 4 * n {
            TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else if payload.len() == 8 * n {
            TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            return Err(format!(
                "payload of {} bytes does not hold {n} f32 or f64 values",
                payload.len()
            ));
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::CorruptTensor {
            path: path.to_owned(),
            reason,
        })
    }
}
